//! Interprets a [`ModelIR`] over tape primitives to train and score it.

pub mod data;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use topoprune_numerics::rng;
use topoprune_numerics::{Bindings, Optimizer, OptimizerConfig, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::ir::{LayerKind, ModelIR, Src, WeightMap};

pub use data::{Dataset, Split};

/// Samples per forward pass when scoring.
const EVAL_BATCH: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Train only layers whose shapes pruning changed.
    pub freeze_unpruned: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(2e-3),
            seed: 0,
            freeze_unpruned: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

fn param_name(layer: &str, slot: &str) -> String {
    format!("{layer}.{slot}")
}

/// Layer weights as a flat parameter store named `<layer>.<slot>`.
pub fn params_of(m: &ModelIR) -> Result<ParamStore> {
    if !m.has_weights() {
        return Err(Error::Weights("model has no weights attached".into()));
    }
    let mut store = ParamStore::new();
    for (layer, slots) in m.weight_map() {
        for (slot, t) in slots {
            store.insert(param_name(&layer, &slot), t);
        }
    }
    Ok(store)
}

/// Copies parameters back into the model's weight slots.
pub fn with_params(m: &ModelIR, store: &ParamStore) -> Result<ModelIR> {
    let mut map = WeightMap::new();
    for (layer, slots) in m.weight_map() {
        let mut out = indexmap::IndexMap::new();
        for slot in slots.keys() {
            out.insert(slot.clone(), store.get(&param_name(&layer, slot))?.clone());
        }
        map.insert(layer, out);
    }
    m.with_weights(&map)
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

/// Forward pass of `m` on `x` (`[N, C, H, W]`), returning logits `[N, K]`.
pub fn forward<'t>(m: &ModelIR, b: &Bindings<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let xs = x.shape();
    let (c, h, w) = m.input_shape();
    if xs.len() != 4 || xs[1..] != [c, h, w] {
        return Err(shape_err(format!(
            "batch {xs:?} does not match input {c}x{h}x{w}"
        )));
    }
    let p = |id: &str, slot: &str| {
        b.get(&param_name(id, slot))
            .map_err(|_| Error::MissingParams(param_name(id, slot)))
    };
    let mut outs: Vec<Var<'t>> = Vec::with_capacity(m.layers().len());
    for (i, l) in m.layers().iter().enumerate() {
        let ins: Vec<Var<'t>> = m
            .inputs_of(i)
            .iter()
            .map(|s| match s {
                Src::Input => x,
                Src::Layer(j) => outs[*j],
            })
            .collect();
        let a = ins[0];
        let y = match l.kind {
            LayerKind::Conv2d | LayerKind::PointwiseConv2d | LayerKind::DepthwiseConv2d => a
                .conv2d(
                    p(&l.id, "weight")?,
                    Some(p(&l.id, "bias")?),
                    l.stride,
                    l.padding,
                    l.groups,
                )?,
            LayerKind::Dense => {
                let n = a.shape()[0];
                a.reshape(&[n, l.in_channels])?
                    .linear(p(&l.id, "weight")?, Some(p(&l.id, "bias")?))?
                    .reshape(&[n, l.out_channels, 1, 1])?
            }
            LayerKind::Maxpool => a.maxpool2d(l.kernel, l.stride, l.padding)?,
            LayerKind::Avgpool => a.avgpool2d(l.kernel, l.stride, l.padding)?,
            LayerKind::GlobalAvgpool => a.global_avgpool()?,
            LayerKind::Relu => a.relu()?,
            LayerKind::Batchnorm => a.channel_affine(p(&l.id, "scale")?, p(&l.id, "shift")?)?,
            LayerKind::Add => ins[1..].iter().try_fold(a, |acc, v| acc.add(*v))?,
            LayerKind::Concat => Var::concat(&ins, 1)?,
            LayerKind::ChannelShuffle => {
                let ch = a.shape()[1];
                let per = ch / l.groups;
                let perm: Vec<usize> = (0..ch)
                    .map(|q| (q % l.groups) * per + q / l.groups)
                    .collect();
                a.index_select(1, &perm)?
            }
            LayerKind::Flatten => {
                let s = a.shape();
                a.reshape(&[s[0], s[1] * s[2] * s[3], 1, 1])?
            }
        };
        outs.push(y);
    }
    let out = outs[m.output_layer()];
    let s = out.shape();
    if s[2] != 1 || s[3] != 1 {
        return Err(shape_err(format!("model output {s:?} is not flat")));
    }
    Ok(out.reshape(&[s[0], s[1]])?)
}

/// Logits for a batch of images, with no gradient tracking.
pub fn execute(m: &ModelIR, x: &Tensor) -> Result<Tensor> {
    let store = params_of(m)?;
    let tape = Tape::new();
    let b = store.bind_frozen(&tape);
    let y = forward(m, &b, tape.input(x))?;
    Ok((*y.value()).clone())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// Predicted class per sample; ties go to the lower index.
pub fn predict(m: &ModelIR, x: &Tensor) -> Result<Vec<usize>> {
    let logits = execute(m, x)?;
    let k = logits.shape()[1];
    Ok(logits.data().chunks(k).map(argmax).collect())
}

/// Top-1 accuracy on `split`.
pub fn evaluate(m: &ModelIR, d: &Dataset, split: Split) -> Result<f64> {
    let idx = d.split(split);
    if idx.is_empty() {
        return Err(Error::EmptySplit(split.name().into()));
    }
    let store = params_of(m)?;
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = d.batch(chunk)?;
        let tape = Tape::new();
        let b = store.bind_frozen(&tape);
        let logits = forward(m, &b, tape.input(&x))?.value();
        let k = logits.shape()[1];
        correct += logits
            .data()
            .chunks(k)
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// Ids of layers whose weights fine-tuning may change under `freeze_unpruned`.
pub fn pruned_layers(m: &ModelIR) -> HashSet<String> {
    m.layers()
        .iter()
        .filter(|l| l.kind.has_weights() && l.is_pruned())
        .map(|l| l.id.clone())
        .collect()
}

/// Minimizes softmax cross-entropy on the train split with shuffled
/// minibatches.
pub fn fit(m: &ModelIR, d: &Dataset, cfg: &TrainConfig) -> Result<(ModelIR, Vec<EpochStats>)> {
    let train = d.split(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptySplit(Split::Train.name().into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut store = params_of(m)?;
    let trainable: Option<HashSet<String>> = cfg.freeze_unpruned.then(|| pruned_layers(m));
    if trainable.as_ref().is_some_and(HashSet::is_empty) || cfg.epochs == 0 {
        return Ok((m.clone(), Vec::new()));
    }
    let keep = |name: &str| match &trainable {
        None => true,
        Some(set) => name
            .rsplit_once('.')
            .is_some_and(|(layer, _)| set.contains(layer)),
    };
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut r = rng::stream(cfg.seed, 40);
    let mut order = train.to_vec();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = d.batch(chunk)?;
            let tape = Tape::new();
            let b = store.bind(&tape);
            let logits = forward(m, &b, tape.input(&x))?;
            let loss = logits.softmax_cross_entropy(&labels)?;
            let lv = loss.scalar();
            if !lv.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            let k = logits.shape()[1];
            correct += logits
                .value()
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            loss_sum += lv * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            store.absorb_filtered(&grads, &b, keep)?;
            opt.step(&mut store);
        }
        history.push(EpochStats {
            epoch,
            loss: loss_sum / order.len() as f64,
            train_accuracy: correct as f64 / order.len() as f64,
        });
    }
    if store.iter().any(|(_, t)| !t.is_finite()) {
        return Err(Error::Divergence(
            "non-finite weights after training".into(),
        ));
    }
    Ok((with_params(m, &store)?, history))
}
