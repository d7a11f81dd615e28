//! Layer parameter slots, initialization and sidecar persistence.

use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use topoprune_numerics::io::{self, TensorGroups};
use topoprune_numerics::Tensor;

use super::{LayerKind, LayerSpec, ModelIR};
use crate::error::{Error, Result};

/// Named tensors of one layer: `weight`/`bias` for conv and dense layers,
/// `scale`/`shift` for batchnorm.
pub type LayerWeights = IndexMap<String, Tensor>;

/// Layer id → parameter slots.
pub type WeightMap = TensorGroups;

/// Expected `(slot, shape)` pairs for a layer; empty for parameter-free kinds.
pub fn expected_shapes(l: &LayerSpec) -> Vec<(&'static str, Vec<usize>)> {
    let (kh, kw) = l.kernel;
    match l.kind {
        LayerKind::Conv2d | LayerKind::PointwiseConv2d => vec![
            (
                "weight",
                vec![l.out_channels, l.in_channels / l.groups, kh, kw],
            ),
            ("bias", vec![l.out_channels]),
        ],
        LayerKind::DepthwiseConv2d => vec![
            ("weight", vec![l.out_channels, 1, kh, kw]),
            ("bias", vec![l.out_channels]),
        ],
        LayerKind::Dense => vec![
            ("weight", vec![l.out_channels, l.in_channels]),
            ("bias", vec![l.out_channels]),
        ],
        LayerKind::Batchnorm => vec![
            ("scale", vec![l.out_channels]),
            ("shift", vec![l.out_channels]),
        ],
        _ => Vec::new(),
    }
}

pub(crate) fn check_layer(l: &LayerSpec, w: &LayerWeights) -> Result<()> {
    let expected = expected_shapes(l);
    if w.len() != expected.len() {
        return Err(Error::Weights(format!(
            "layer `{}` has {} weight slots, expected {}",
            l.id,
            w.len(),
            expected.len()
        )));
    }
    for (slot, shape) in expected {
        let t = w
            .get(slot)
            .ok_or_else(|| Error::Weights(format!("layer `{}` lacks `{slot}`", l.id)))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Weights(format!(
                "layer `{}` slot `{slot}` has shape {:?}, expected {shape:?}",
                l.id,
                t.shape()
            )));
        }
    }
    Ok(())
}

fn fan_in(l: &LayerSpec) -> usize {
    match l.kind {
        LayerKind::Dense => l.in_channels,
        LayerKind::DepthwiseConv2d => l.kernel.0 * l.kernel.1,
        _ => l.in_channels / l.groups * l.kernel.0 * l.kernel.1,
    }
}

impl ModelIR {
    /// Fresh parameters: `U(±√(1/fan_in))` for conv/dense weights and biases,
    /// unit scale and zero shift for batchnorm.
    pub fn init_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelIR {
        let mut out = self.clone();
        for l in out.layers_mut() {
            let mut w = LayerWeights::new();
            for (slot, shape) in expected_shapes(l) {
                let t = match slot {
                    "scale" => Tensor::ones(&shape),
                    "shift" => Tensor::zeros(&shape),
                    _ => Tensor::fan_in_uniform(&shape, fan_in(l), rng),
                };
                w.insert(slot.to_string(), t);
            }
            l.weights = (!w.is_empty()).then_some(w);
        }
        out
    }

    /// Every parameter set to zero (batchnorm scale included).
    pub fn zero_weights(&self) -> ModelIR {
        let mut out = self.clone();
        for l in out.layers_mut() {
            let w: LayerWeights = expected_shapes(l)
                .into_iter()
                .map(|(slot, shape)| (slot.to_string(), Tensor::zeros(&shape)))
                .collect();
            l.weights = (!w.is_empty()).then_some(w);
        }
        out
    }

    /// Attaches weights, checking every slot against the inferred shapes.
    pub fn with_weights(&self, map: &WeightMap) -> Result<ModelIR> {
        let mut out = self.clone();
        for l in out.layers_mut() {
            if !l.kind.has_weights() {
                continue;
            }
            let w = map
                .get(&l.id)
                .ok_or_else(|| Error::Weights(format!("no weights for layer `{}`", l.id)))?;
            check_layer(l, w)?;
            l.weights = Some(w.clone());
        }
        Ok(out)
    }

    pub fn without_weights(&self) -> ModelIR {
        let mut out = self.clone();
        for l in out.layers_mut() {
            l.weights = None;
        }
        out
    }

    /// Collected parameters in layer order.
    pub fn weight_map(&self) -> WeightMap {
        self.layers
            .iter()
            .filter_map(|l| l.weights.as_ref().map(|w| (l.id.clone(), w.clone())))
            .collect()
    }

    /// Writes the sidecar blob at `path` and its manifest next to it.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        if !self.has_weights() {
            return Err(Error::Weights("model carries no weights".into()));
        }
        io::save(&self.weight_map(), path, &io::manifest_path_for(path))?;
        Ok(())
    }

    pub fn load_weights(&self, path: &Path) -> Result<ModelIR> {
        let map = io::load(path, &io::manifest_path_for(path))?;
        self.with_weights(&map)
    }

    /// Parameter count per layer, in layer order.
    pub fn param_counts(&self) -> IndexMap<String, usize> {
        self.layers
            .iter()
            .map(|l| {
                let n = expected_shapes(l)
                    .iter()
                    .map(|(_, s)| s.iter().product::<usize>())
                    .sum();
                (l.id.clone(), n)
            })
            .collect()
    }
}
