//! Declarative network description: layers, dataflow edges, blocks and
//! share groups, with forward shape inference and structural validation.
//!
//! A document lists layers in any order; edges reference producers by id and
//! the reserved id `input` denotes the network input. After validation the
//! layers are stored in a stable topological order.

mod flops;
mod prune;
mod strategy;
mod weights;

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use topoprune_numerics::kernels::out_extent;

use crate::error::{Error, Result};

pub use flops::{count_flops, count_params, FlopsReport};
pub use prune::{apply_policy, apply_policy_traced, keep_count, PruningPolicy, DEFAULT_A_MAX};
pub use strategy::strategy_ratios;
pub use weights::{LayerWeights, WeightMap};

pub const INPUT_ID: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    DepthwiseConv2d,
    PointwiseConv2d,
    Dense,
    Maxpool,
    Avgpool,
    GlobalAvgpool,
    Relu,
    Batchnorm,
    Add,
    Concat,
    ChannelShuffle,
    Flatten,
}

impl LayerKind {
    pub const ALL: [LayerKind; 13] = [
        LayerKind::Conv2d,
        LayerKind::DepthwiseConv2d,
        LayerKind::PointwiseConv2d,
        LayerKind::Dense,
        LayerKind::Maxpool,
        LayerKind::Avgpool,
        LayerKind::GlobalAvgpool,
        LayerKind::Relu,
        LayerKind::Batchnorm,
        LayerKind::Add,
        LayerKind::Concat,
        LayerKind::ChannelShuffle,
        LayerKind::Flatten,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::DepthwiseConv2d => "depthwise_conv2d",
            LayerKind::PointwiseConv2d => "pointwise_conv2d",
            LayerKind::Dense => "dense",
            LayerKind::Maxpool => "maxpool",
            LayerKind::Avgpool => "avgpool",
            LayerKind::GlobalAvgpool => "global_avgpool",
            LayerKind::Relu => "relu",
            LayerKind::Batchnorm => "batchnorm",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
            LayerKind::ChannelShuffle => "channel_shuffle",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Layers that own their output channel count (and so can be filter-pruned).
    pub fn sets_channels(self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d | LayerKind::PointwiseConv2d | LayerKind::Dense
        )
    }

    pub fn is_conv(self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::PointwiseConv2d
        )
    }

    pub fn has_weights(self) -> bool {
        self.is_conv() || matches!(self, LayerKind::Dense | LayerKind::Batchnorm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Plain,
    Residual,
    MobileV1,
    MobileV2,
    Shuffle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub kind: BlockKind,
    pub layers: Vec<String>,
}

fn one() -> (usize, usize) {
    (1, 1)
}

fn one_usize() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    #[serde(default)]
    pub in_channels: usize,
    #[serde(default)]
    pub out_channels: usize,
    #[serde(default = "one")]
    pub kernel: (usize, usize),
    #[serde(default = "one")]
    pub stride: (usize, usize),
    #[serde(default)]
    pub padding: (usize, usize),
    /// Convolution groups, or the group count of a channel shuffle.
    #[serde(default = "one_usize")]
    pub groups: usize,
    /// Requested eligibility; resolved against the block strategy at build time.
    #[serde(default = "yes")]
    pub prunable: bool,
    /// Inferred output spatial extent.
    #[serde(default)]
    pub out_hw: (usize, usize),
    #[serde(default)]
    pub original_out_channels: usize,
    #[serde(default)]
    pub original_in_channels: usize,
    /// Cumulative requested pruning `1 − Π(1 − a)` over applied policies.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub pruned_fraction: f64,
    #[serde(skip)]
    pub weights: Option<LayerWeights>,
}

impl LayerSpec {
    pub fn new(id: &str, kind: LayerKind) -> Self {
        Self {
            id: id.to_string(),
            kind,
            in_channels: 0,
            out_channels: 0,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
            prunable: true,
            out_hw: (0, 0),
            original_out_channels: 0,
            original_in_channels: 0,
            pruned_fraction: 0.0,
            weights: None,
        }
    }

    /// Output tensor shape `(C, H, W)`.
    pub fn out_shape(&self) -> (usize, usize, usize) {
        (self.out_channels, self.out_hw.0, self.out_hw.1)
    }

    /// Whether pruning has changed either channel dimension of this layer.
    pub fn is_pruned(&self) -> bool {
        self.out_channels != self.original_out_channels
            || self.in_channels != self.original_in_channels
    }
}

/// Producer of a layer input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Src {
    Input,
    Layer(usize),
}

#[derive(Debug, Clone, Default)]
struct Derived {
    index: HashMap<String, usize>,
    inputs: Vec<Vec<Src>>,
    consumers: Vec<Vec<usize>>,
    input_consumers: Vec<usize>,
    block_of: Vec<Option<usize>>,
    sink: usize,
    /// Channel-provenance class of every layer output.
    class_of: Vec<usize>,
    /// Required multiple for kept channel counts, per layer.
    multiple: Vec<usize>,
    /// Agent slots: groups of prunable layers driven by one ratio.
    slots: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDoc {
    input_shape: (usize, usize, usize),
    layers: Vec<LayerSpec>,
    edges: Vec<(String, String)>,
    #[serde(default)]
    blocks: Vec<BlockSpec>,
    #[serde(default)]
    share_groups: Vec<Vec<String>>,
}

/// Validated network IR. Immutable: transforms return new values.
#[derive(Debug, Clone)]
pub struct ModelIR {
    input_shape: (usize, usize, usize),
    layers: Vec<LayerSpec>,
    edges: Vec<(String, String)>,
    blocks: Vec<BlockSpec>,
    share_groups: Vec<Vec<String>>,
    derived: Derived,
}

impl PartialEq for ModelIR {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape
            && self.layers == other.layers
            && self.edges == other.edges
            && self.blocks == other.blocks
            && self.share_groups == other.share_groups
    }
}

/// Parses and validates an IR document.
pub fn parse_model(text: &str) -> Result<ModelIR> {
    let doc: ModelDoc = serde_json::from_str(text)
        .map_err(|e| Error::Schema(format!("malformed document: {e}")))?;
    ModelIR::from_doc(doc)
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Schema(msg.into())
}

fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

impl ModelIR {
    fn from_doc(doc: ModelDoc) -> Result<Self> {
        let ModelDoc {
            input_shape,
            layers,
            edges,
            blocks,
            share_groups,
        } = doc;
        if input_shape.0 == 0 || input_shape.1 == 0 || input_shape.2 == 0 {
            return Err(schema(format!(
                "input_shape {input_shape:?} has a zero extent"
            )));
        }
        let mut index = HashMap::new();
        for (i, l) in layers.iter().enumerate() {
            if l.id == INPUT_ID {
                return Err(schema("`input` is a reserved layer id"));
            }
            if index.insert(l.id.clone(), i).is_some() {
                return Err(schema(format!("duplicate layer id `{}`", l.id)));
            }
            if l.kernel.0 == 0 || l.kernel.1 == 0 || l.stride.0 == 0 || l.stride.1 == 0 {
                return Err(schema(format!(
                    "layer `{}` has a zero kernel or stride",
                    l.id
                )));
            }
            if l.groups == 0 {
                return Err(schema(format!("layer `{}` has zero groups", l.id)));
            }
        }
        for (from, to) in &edges {
            if from != INPUT_ID && !index.contains_key(from) {
                return Err(schema(format!("edge from unknown layer `{from}`")));
            }
            if !index.contains_key(to) {
                return Err(schema(format!("edge into unknown layer `{to}`")));
            }
        }

        // Stable Kahn ordering by declaration index.
        let n = layers.len();
        let mut indeg = vec![0usize; n];
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (from, to) in &edges {
            if from == INPUT_ID {
                continue;
            }
            let (f, t) = (index[from], index[to]);
            succ[f].push(t);
            indeg[t] += 1;
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for &t in &succ[i] {
                indeg[t] -= 1;
                if indeg[t] == 0 {
                    ready.insert(t);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap();
            return Err(Error::Cycle(layers[stuck].id.clone()));
        }
        let mut slots: Vec<Option<LayerSpec>> = layers.into_iter().map(Some).collect();
        let layers: Vec<LayerSpec> = order.iter().map(|&i| slots[i].take().unwrap()).collect();

        let mut ir = ModelIR {
            input_shape,
            layers,
            edges,
            blocks,
            share_groups,
            derived: Derived::default(),
        };
        ir.link()?;
        ir.infer_shapes()?;
        ir.check_blocks()?;
        strategy::resolve(&mut ir)?;
        Ok(ir)
    }

    fn link(&mut self) -> Result<()> {
        let n = self.layers.len();
        let index: HashMap<String, usize> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.clone(), i))
            .collect();
        let mut inputs = vec![Vec::new(); n];
        let mut consumers = vec![Vec::new(); n];
        let mut input_consumers = Vec::new();
        for (from, to) in &self.edges {
            let t = index[to];
            if from == INPUT_ID {
                inputs[t].push(Src::Input);
                input_consumers.push(t);
            } else {
                let f = index[from];
                inputs[t].push(Src::Layer(f));
                consumers[f].push(t);
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            let k = inputs[i].len();
            let ok = match l.kind {
                LayerKind::Add => k >= 2,
                LayerKind::Concat => k >= 1,
                _ => k == 1,
            };
            if !ok {
                return Err(schema(format!(
                    "layer `{}` ({}) has {k} inputs",
                    l.id,
                    l.kind.name()
                )));
            }
        }
        let sinks: Vec<usize> = (0..n).filter(|&i| consumers[i].is_empty()).collect();
        if sinks.len() != 1 {
            let ids: Vec<&str> = sinks.iter().map(|&i| self.layers[i].id.as_str()).collect();
            return Err(schema(format!(
                "expected exactly one output layer, found {ids:?}"
            )));
        }
        let mut block_of = vec![None; n];
        for (b, block) in self.blocks.iter().enumerate() {
            for id in &block.layers {
                let &i = index.get(id).ok_or_else(|| {
                    schema(format!("block `{}` names unknown layer `{id}`", block.name))
                })?;
                if block_of[i].is_some() {
                    return Err(schema(format!(
                        "layer `{id}` belongs to more than one block"
                    )));
                }
                block_of[i] = Some(b);
            }
        }
        self.derived = Derived {
            index,
            inputs,
            consumers,
            input_consumers,
            block_of,
            sink: sinks[0],
            ..Derived::default()
        };
        Ok(())
    }

    fn src_shape(&self, s: Src) -> (usize, usize, usize) {
        match s {
            Src::Input => self.input_shape,
            Src::Layer(i) => self.layers[i].out_shape(),
        }
    }

    /// Forward shape propagation; fills `in_channels`, `out_channels` and `out_hw`.
    fn infer_shapes(&mut self) -> Result<()> {
        for i in 0..self.layers.len() {
            let ins: Vec<(usize, usize, usize)> = self.derived.inputs[i]
                .iter()
                .map(|&s| self.src_shape(s))
                .collect();
            let l = &mut self.layers[i];
            let (c, h, w) = ins[0];
            let id = l.id.clone();
            let (out_c, out_hw) = match l.kind {
                LayerKind::Conv2d | LayerKind::PointwiseConv2d => {
                    if l.kind == LayerKind::PointwiseConv2d && l.kernel != (1, 1) {
                        return Err(shape(format!(
                            "pointwise layer `{id}` has kernel {:?}",
                            l.kernel
                        )));
                    }
                    if l.out_channels == 0 {
                        return Err(shape(format!("layer `{id}` needs out_channels >= 1")));
                    }
                    if c % l.groups != 0 || l.out_channels % l.groups != 0 {
                        return Err(shape(format!(
                            "layer `{id}`: groups {} must divide {c} inputs and {} outputs",
                            l.groups, l.out_channels
                        )));
                    }
                    (
                        l.out_channels,
                        out_extent(h, w, l.kernel, l.stride, l.padding),
                    )
                }
                LayerKind::DepthwiseConv2d => {
                    if l.out_channels != 0 && l.out_channels != c {
                        return Err(shape(format!(
                            "depthwise layer `{id}` maps {c} channels to {}",
                            l.out_channels
                        )));
                    }
                    l.groups = c;
                    (c, out_extent(h, w, l.kernel, l.stride, l.padding))
                }
                LayerKind::Dense => {
                    if (h, w) != (1, 1) {
                        return Err(shape(format!(
                            "dense layer `{id}` expects a flat input, got {c}x{h}x{w}"
                        )));
                    }
                    if l.out_channels == 0 {
                        return Err(shape(format!("layer `{id}` needs out_channels >= 1")));
                    }
                    (l.out_channels, (1, 1))
                }
                LayerKind::Maxpool | LayerKind::Avgpool => {
                    if l.padding.0 >= l.kernel.0 || l.padding.1 >= l.kernel.1 {
                        return Err(shape(format!("pool `{id}` padding exceeds its window")));
                    }
                    (c, out_extent(h, w, l.kernel, l.stride, l.padding))
                }
                LayerKind::GlobalAvgpool => (c, (1, 1)),
                LayerKind::Relu | LayerKind::Batchnorm => (c, (h, w)),
                LayerKind::ChannelShuffle => {
                    if c % l.groups != 0 {
                        return Err(shape(format!(
                            "channel shuffle `{id}`: {} groups do not divide {c} channels",
                            l.groups
                        )));
                    }
                    (c, (h, w))
                }
                LayerKind::Flatten => (c * h * w, (1, 1)),
                LayerKind::Add => {
                    if let Some(bad) = ins.iter().find(|s| **s != ins[0]) {
                        return Err(shape(format!(
                            "add `{id}` joins unequal shapes {:?} and {bad:?}",
                            ins[0]
                        )));
                    }
                    (c, (h, w))
                }
                LayerKind::Concat => {
                    if let Some(bad) = ins.iter().find(|s| (s.1, s.2) != (h, w)) {
                        return Err(shape(format!(
                            "concat `{id}` joins spatial extents {h}x{w} and {}x{}",
                            bad.1, bad.2
                        )));
                    }
                    (ins.iter().map(|s| s.0).sum(), (h, w))
                }
            };
            if out_hw.0 == 0 || out_hw.1 == 0 {
                return Err(shape(format!(
                    "layer `{id}`: window {:?} does not fit {h}x{w}",
                    l.kernel
                )));
            }
            if l.kind.sets_channels() || l.kind == LayerKind::DepthwiseConv2d {
                if l.in_channels != 0 && l.original_in_channels == 0 && l.in_channels != c {
                    return Err(shape(format!(
                        "layer `{id}` declares {} input channels but receives {c}",
                        l.in_channels
                    )));
                }
            }
            l.in_channels = c;
            l.out_channels = out_c;
            l.out_hw = out_hw;
            if l.original_out_channels == 0 {
                l.original_out_channels = out_c;
            }
            if l.original_in_channels == 0 {
                l.original_in_channels = c;
            }
            if !l.kind.sets_channels() {
                l.prunable = false;
            }
        }
        Ok(())
    }

    fn check_blocks(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for b in &self.blocks {
            if !names.insert(&b.name) {
                return Err(schema(format!("duplicate block name `{}`", b.name)));
            }
            if b.layers.is_empty() {
                return Err(schema(format!("block `{}` is empty", b.name)));
            }
            let outs = self.block_outputs(b);
            if outs.len() != 1 {
                return Err(schema(format!(
                    "block `{}` must have exactly one output layer, found {}",
                    b.name,
                    outs.len()
                )));
            }
        }
        Ok(())
    }

    /// Layers of `block` whose output leaves the block (or is the model output).
    pub(crate) fn block_outputs(&self, block: &BlockSpec) -> Vec<usize> {
        let members: BTreeSet<usize> = block
            .layers
            .iter()
            .map(|id| self.derived.index[id])
            .collect();
        members
            .iter()
            .copied()
            .filter(|&i| {
                i == self.derived.sink
                    || self.derived.consumers[i]
                        .iter()
                        .any(|c| !members.contains(c))
            })
            .collect()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.derived.index.get(id).map(|&i| &self.layers[i])
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.derived.index.get(id).copied()
    }

    pub fn edges(&self) -> &[(String, String)] {
        &self.edges
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn share_groups(&self) -> &[Vec<String>] {
        &self.share_groups
    }

    pub fn inputs_of(&self, i: usize) -> &[Src] {
        &self.derived.inputs[i]
    }

    pub fn consumers_of(&self, i: usize) -> &[usize] {
        &self.derived.consumers[i]
    }

    pub fn input_consumers(&self) -> &[usize] {
        &self.derived.input_consumers
    }

    pub fn block_of(&self, i: usize) -> Option<usize> {
        self.derived.block_of[i]
    }

    pub fn output_layer(&self) -> usize {
        self.derived.sink
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        self.layers[self.derived.sink].out_shape()
    }

    pub fn prunable_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.prunable)
    }

    pub fn has_weights(&self) -> bool {
        self.layers
            .iter()
            .filter(|l| l.kind.has_weights())
            .all(|l| l.weights.is_some())
    }

    /// Serializes to the IR document format (weights are not included).
    pub fn to_json(&self) -> String {
        let doc = ModelDoc {
            input_shape: self.input_shape,
            layers: self.layers.clone(),
            edges: self.edges.clone(),
            blocks: self.blocks.clone(),
            share_groups: self.share_groups.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("IR serializes") + "\n"
    }

    /// Re-validates after a structural edit, keeping `original_*` bookkeeping.
    pub(crate) fn rebuild(
        input_shape: (usize, usize, usize),
        layers: Vec<LayerSpec>,
        edges: Vec<(String, String)>,
        blocks: Vec<BlockSpec>,
        share_groups: Vec<Vec<String>>,
    ) -> Result<Self> {
        Self::from_doc(ModelDoc {
            input_shape,
            layers,
            edges,
            blocks,
            share_groups,
        })
    }

    /// Symbolic forward pass: re-derives every shape from scratch and checks
    /// it against the stored one.
    pub fn symbolic_forward(&self) -> Result<()> {
        let mut layers = self.layers.clone();
        for l in &mut layers {
            l.in_channels = 0;
            l.out_hw = (0, 0);
            if !l.kind.sets_channels() {
                l.out_channels = 0;
            }
            l.weights = None;
        }
        let fresh = Self::rebuild(
            self.input_shape,
            layers,
            self.edges.clone(),
            self.blocks.clone(),
            self.share_groups.clone(),
        )?;
        for (a, b) in fresh.layers.iter().zip(&self.layers) {
            if (a.in_channels, a.out_channels, a.out_hw)
                != (b.in_channels, b.out_channels, b.out_hw)
            {
                return Err(shape(format!(
                    "layer `{}` disagrees with re-derived shape",
                    a.id
                )));
            }
            if let Some(w) = &b.weights {
                weights::check_layer(b, w)?;
            }
        }
        Ok(())
    }

    /// Breadth-first order of layers reachable from the input; used by tests.
    pub fn reachable_from_input(&self) -> Vec<usize> {
        let mut seen = vec![false; self.layers.len()];
        let mut queue: VecDeque<usize> = self.derived.input_consumers.iter().copied().collect();
        let mut out = Vec::new();
        while let Some(i) = queue.pop_front() {
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            out.push(i);
            queue.extend(self.derived.consumers[i].iter().copied());
        }
        out
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.layers
    }
}
