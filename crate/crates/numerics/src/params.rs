use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::{NumericsError, Result};

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

/// Tape handles for every parameter of a store, keyed by name.
pub struct Bindings<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> Bindings<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bindings<'t> {
        Bindings {
            vars: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), tape.param(t)))
                .collect(),
        }
    }

    /// Records every parameter as a constant (no gradient flow).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bindings<'t> {
        Bindings {
            vars: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), tape.constant(t.clone())))
                .collect(),
        }
    }

    /// Accumulates tape gradients into the parameters' grad buffers.
    pub fn absorb(&mut self, grads: &Gradients, bound: &Bindings<'_>) -> Result<()> {
        self.absorb_filtered(grads, bound, |_| true)
    }

    pub fn absorb_filtered<F: Fn(&str) -> bool>(
        &mut self,
        grads: &Gradients,
        bound: &Bindings<'_>,
        keep: F,
    ) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            if !keep(name) {
                continue;
            }
            if let Some(var) = bound.vars.get(name) {
                if let Some(g) = grads.raw(*var) {
                    t.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Polyak averaging `self ← (1 − tau)·self + tau·online`, matched by name.
    pub fn soft_update_from(&mut self, online: &ParamStore, tau: f64) -> Result<()> {
        for (name, src) in &online.params {
            let dst = self.get_mut(name)?;
            if dst.shape() != src.shape() {
                return Err(NumericsError::Shape(format!(
                    "soft update of `{name}`: {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = (1.0 - tau) * *d + tau * s;
            }
        }
        Ok(())
    }
}
