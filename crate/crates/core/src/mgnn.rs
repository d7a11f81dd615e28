//! Multi-stage graph encoder.
//!
//! One message-passing round maps node states `h` to
//! `relu((1/c_i) Σ_{k: j→i} W (h_j ∘ e_k))` with `c_i = max(1, in-degree)`;
//! a graph's embedding is the pooled sum `Σ α_i h_i`. Stage 1 embeds each
//! distinct motif with primitive embeddings as edge features; stage 2 embeds
//! the network graph with motif embeddings as edge features. In both stages
//! the type embedding is multiplied element-wise by a learned projection of
//! the edge's attribute vector.

use std::cell::Cell;
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use topoprune_numerics::{Bindings, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::hgraph::{CompGraph, HierGraph, MOTIF_ATTR_DIM, TOP_ATTR_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MgnnConfig {
    pub hidden: usize,
    pub rounds: usize,
    pub num_primitives: usize,
}

impl Default for MgnnConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            rounds: 3,
            num_primitives: crate::ir::LayerKind::ALL.len(),
        }
    }
}

/// How edge features enter a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeMode {
    /// Unit-RMS type embedding ∘ attribute projection.
    Featured,
    /// Every edge feature replaced by an all-ones vector (still multiplied).
    Ones,
    /// No edge features at all: plain graph convolution.
    Plain,
}

fn dim(msg: impl Into<String>) -> Error {
    Error::Dim(msg.into())
}

/// Row-normalized in-neighbour aggregation matrix `[N, E]`.
fn aggregation(g: &CompGraph) -> Tensor {
    let n = g.num_nodes;
    let e = g.edges.len();
    let mut deg = vec![0usize; n];
    for edge in &g.edges {
        deg[edge.dst] += 1;
    }
    let mut m = vec![0.0; n * e];
    for (k, edge) in g.edges.iter().enumerate() {
        m[edge.dst * e + k] = 1.0 / deg[edge.dst].max(1) as f64;
    }
    Tensor::new(vec![n, e], m).expect("aggregation shape")
}

fn sources(g: &CompGraph) -> Vec<usize> {
    g.edges.iter().map(|e| e.src).collect()
}

/// One edge-featured round. `h` is `[N, H]`, `e` is `[E, H]`, `w` is `[H, H]`.
pub fn message_pass<'t>(
    tape: &'t Tape,
    g: &CompGraph,
    h: Var<'t>,
    e: Var<'t>,
    w: Var<'t>,
) -> Result<Var<'t>> {
    let hs = h.shape();
    if hs.len() != 2 || hs[0] != g.num_nodes {
        return Err(dim(format!("node states {hs:?} for {} nodes", g.num_nodes)));
    }
    if e.shape() != [g.edges.len(), hs[1]] {
        return Err(dim(format!(
            "edge features {:?} for {} edges of width {}",
            e.shape(),
            g.edges.len(),
            hs[1]
        )));
    }
    let msgs = h.index_select(0, &sources(g))?.mul(e)?;
    aggregate(tape, g, msgs, w)
}

/// The edge-free round: messages are the neighbour states themselves.
pub fn gcn_pass<'t>(tape: &'t Tape, g: &CompGraph, h: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let hs = h.shape();
    if hs.len() != 2 || hs[0] != g.num_nodes {
        return Err(dim(format!("node states {hs:?} for {} nodes", g.num_nodes)));
    }
    let msgs = h.index_select(0, &sources(g))?;
    aggregate(tape, g, msgs, w)
}

fn aggregate<'t>(tape: &'t Tape, g: &CompGraph, msgs: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let hidden = msgs.shape()[1];
    if w.shape() != [hidden, hidden] {
        return Err(dim(format!(
            "round weight {:?} for width {hidden}",
            w.shape()
        )));
    }
    let agg = if g.edges.is_empty() {
        tape.constant(Tensor::zeros(&[g.num_nodes, hidden]))
    } else {
        tape.constant(aggregation(g)).matmul(msgs)?
    };
    Ok(agg.linear(w, None)?.relu()?)
}

/// `Σ α_i h_i` over the rows of `h`.
pub fn pool<'t>(h: Var<'t>, alpha: Var<'t>) -> Result<Var<'t>> {
    let hs = h.shape();
    if hs.len() != 2 || alpha.shape() != [hs[0]] {
        return Err(dim(format!(
            "pooling {:?} nodes with α {:?}",
            hs,
            alpha.shape()
        )));
    }
    Ok(alpha.reshape(&[1, hs[0]])?.matmul(h)?.reshape(&[hs[1]])?)
}

/// Encoder parameter naming and the stage-1 invocation counter.
#[derive(Debug)]
pub struct Mgnn {
    pub config: MgnnConfig,
    prefix: String,
    mode: EdgeMode,
    motif_calls: Cell<usize>,
}

impl Clone for Mgnn {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            prefix: self.prefix.clone(),
            mode: self.mode,
            motif_calls: Cell::new(0),
        }
    }
}

pub const TOP_ALPHA: &str = "top";

/// Stabilizer for the unit-RMS rescaling of edge-type embeddings.
pub const TYPE_NORM_EPS: f64 = 1e-8;

impl Mgnn {
    pub fn new(config: MgnnConfig, prefix: &str) -> Self {
        assert!(config.hidden >= 1, "hidden width must be positive");
        Self {
            config,
            prefix: prefix.to_string(),
            mode: EdgeMode::Featured,
            motif_calls: Cell::new(0),
        }
    }

    pub fn with_mode(mut self, mode: EdgeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn mode(&self) -> EdgeMode {
        self.mode
    }

    fn name(&self, s: &str) -> String {
        format!("{}{s}", self.prefix)
    }

    pub fn alpha_name(&self, graph: &str) -> String {
        self.name(&format!("alpha.{graph}"))
    }

    /// Number of stage-1 motif encodings performed so far.
    pub fn motif_calls(&self) -> usize {
        self.motif_calls.get()
    }

    pub fn reset_calls(&self) {
        self.motif_calls.set(0);
    }

    /// Shared (graph-independent) parameters.
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let h = self.config.hidden;
        let p = self.config.num_primitives;
        store.insert(self.name("prim"), Tensor::fan_in_uniform(&[h, p], p, rng));
        for (level, attr) in [(1, MOTIF_ATTR_DIM), (2, TOP_ATTR_DIM)] {
            store.insert(
                self.name(&format!("l{level}.attr.w")),
                Tensor::fan_in_uniform(&[h, attr], attr, rng),
            );
            store.insert(self.name(&format!("l{level}.attr.b")), Tensor::ones(&[h]));
            for r in 0..self.config.rounds {
                store.insert(
                    self.name(&format!("l{level}.w{r}")),
                    Tensor::uniform(&[h, h], (6.0 / h as f64).sqrt(), rng),
                );
            }
        }
    }

    /// Ensures a pooling vector exists for every graph in `hg`, sized to its
    /// node count; mismatched vectors are reset to all-ones.
    pub fn prepare(&self, store: &mut ParamStore, hg: &HierGraph) {
        let mut want: Vec<(String, usize)> = hg
            .motifs
            .iter()
            .map(|m| (self.alpha_name(&m.key.0), m.graph.num_nodes))
            .collect();
        want.push((self.alpha_name(TOP_ALPHA), hg.top.num_nodes));
        for (name, n) in want {
            let ok = store.get(&name).map(|t| t.shape() == [n]).unwrap_or(false);
            if !ok {
                store.insert(name, Tensor::ones(&[n]));
            }
        }
    }

    fn param<'t>(&self, b: &Bindings<'t>, name: &str) -> Result<Var<'t>> {
        b.get(name)
            .map_err(|_| Error::MissingParams(name.to_string()))
    }

    fn edge_features<'t>(
        &self,
        tape: &'t Tape,
        b: &Bindings<'t>,
        g: &CompGraph,
        types: Var<'t>,
        level: usize,
    ) -> Result<Var<'t>> {
        let h = self.config.hidden;
        let e = g.edges.len();
        match self.mode {
            EdgeMode::Ones | EdgeMode::Plain => Ok(tape.constant(Tensor::ones(&[e, h]))),
            EdgeMode::Featured => {
                let ids: Vec<usize> = g.edges.iter().map(|x| x.type_id).collect();
                if let Some(&bad) = ids.iter().find(|&&t| t >= types.shape()[0]) {
                    return Err(dim(format!(
                        "edge type {bad} outside a table of {}",
                        types.shape()[0]
                    )));
                }
                let attr: Vec<f64> = g
                    .edges
                    .iter()
                    .flat_map(|x| x.attr.iter().copied())
                    .collect();
                let attr = tape.constant(Tensor::new(vec![e, g.attr_dim], attr)?);
                let w = self.param(b, &format!("{}l{level}.attr.w", self.prefix))?;
                let bias = self.param(b, &format!("{}l{level}.attr.b", self.prefix))?;
                let proj = attr.linear(w, Some(bias))?;
                let types = types.rms_norm_rows(TYPE_NORM_EPS)?;
                Ok(types.index_select(0, &ids)?.mul(proj)?)
            }
        }
    }

    /// Rounds applied to `g`: the configured count, capped by the longest
    /// path. Messages carry no self term, so beyond that depth every state
    /// would be zero.
    pub fn rounds_for(&self, g: &CompGraph) -> usize {
        self.config.rounds.min(g.longest_path()).max(1)
    }

    /// Rounds of message passing from all-ones node states, then pooling.
    fn embed_graph<'t>(
        &self,
        tape: &'t Tape,
        b: &Bindings<'t>,
        g: &CompGraph,
        types: Var<'t>,
        level: usize,
        alpha: &str,
    ) -> Result<Var<'t>> {
        let mut h = tape.constant(Tensor::ones(&[g.num_nodes, self.config.hidden]));
        let e = if self.mode == EdgeMode::Plain || g.edges.is_empty() {
            None
        } else {
            Some(self.edge_features(tape, b, g, types, level)?)
        };
        for r in 0..self.rounds_for(g) {
            let w = self.param(b, &format!("{}l{level}.w{r}", self.prefix))?;
            h = match e {
                Some(e) => message_pass(tape, g, h, e, w)?,
                None => gcn_pass(tape, g, h, w)?,
            };
        }
        let alpha = self.param(b, &self.alpha_name(alpha))?;
        pool(h, alpha)
    }

    /// Primitive embedding table `[P, H]`.
    fn primitive_embeddings<'t>(
        &self,
        tape: &'t Tape,
        b: &Bindings<'t>,
        hg: &HierGraph,
    ) -> Result<Var<'t>> {
        let p = hg.primitives.len();
        let feats: Vec<f64> = hg
            .primitives
            .iter()
            .flat_map(|x| x.feature.iter().copied())
            .collect();
        let onehot = tape.constant(Tensor::new(vec![p, hg.primitives[0].feature.len()], feats)?);
        let w = self.param(b, &self.name("prim"))?;
        if w.shape()[1] != onehot.shape()[1] {
            return Err(dim(format!(
                "primitive features of width {} vs table {:?}",
                onehot.shape()[1],
                w.shape()
            )));
        }
        Ok(onehot.linear(w, None)?)
    }

    /// Stage-1 embeddings of every distinct motif, as rows in table order.
    pub fn encode_motifs<'t>(
        &self,
        tape: &'t Tape,
        b: &Bindings<'t>,
        hg: &HierGraph,
    ) -> Result<Var<'t>> {
        let prims = self.primitive_embeddings(tape, b, hg)?;
        let mut rows = Vec::with_capacity(hg.motifs.len());
        for m in &hg.motifs {
            self.motif_calls.set(self.motif_calls.get() + 1);
            let e = self.embed_graph(tape, b, &m.graph, prims, 1, &m.key.0)?;
            rows.push(e.reshape(&[1, self.config.hidden])?);
        }
        Ok(Var::concat(&rows, 0)?)
    }

    /// Final graph embedding `[H]`.
    pub fn encode<'t>(&self, tape: &'t Tape, b: &Bindings<'t>, hg: &HierGraph) -> Result<Var<'t>> {
        if hg.is_flat() {
            let prims = self.primitive_embeddings(tape, b, hg)?;
            return self.embed_graph(tape, b, &hg.top, prims, 1, TOP_ALPHA);
        }
        let motifs = self.encode_motifs(tape, b, hg)?;
        self.embed_graph(tape, b, &hg.top, motifs, 2, TOP_ALPHA)
    }

    /// Embeddings `[B, H]` for several hierarchies; each distinct motif key is
    /// encoded once across the whole batch, and repeated references to the
    /// same hierarchy object share one row.
    pub fn encode_batch<'t>(
        &self,
        tape: &'t Tape,
        b: &Bindings<'t>,
        hgs: &[&HierGraph],
    ) -> Result<Var<'t>> {
        let h = self.config.hidden;
        let mut cache: HashMap<&str, Var<'t>> = HashMap::new();
        let mut prims: Option<Var<'t>> = None;
        let mut seen: HashMap<*const HierGraph, Var<'t>> = HashMap::new();
        let mut rows = Vec::with_capacity(hgs.len());
        for hg in hgs {
            if let Some(&row) = seen.get(&(*hg as *const HierGraph)) {
                rows.push(row);
                continue;
            }
            let p = match prims {
                Some(p) => p,
                None => *prims.insert(self.primitive_embeddings(tape, b, hg)?),
            };
            let g = if hg.is_flat() {
                self.embed_graph(tape, b, &hg.top, p, 1, TOP_ALPHA)?
            } else {
                let mut table = Vec::with_capacity(hg.motifs.len());
                for m in &hg.motifs {
                    let e = match cache.get(m.key.0.as_str()) {
                        Some(&e) => e,
                        None => {
                            self.motif_calls.set(self.motif_calls.get() + 1);
                            let e = self
                                .embed_graph(tape, b, &m.graph, p, 1, &m.key.0)?
                                .reshape(&[1, h])?;
                            cache.insert(m.key.0.as_str(), e);
                            e
                        }
                    };
                    table.push(e);
                }
                let table = Var::concat(&table, 0)?;
                self.embed_graph(tape, b, &hg.top, table, 2, TOP_ALPHA)?
            };
            let row = g.reshape(&[1, h])?;
            seen.insert(*hg as *const HierGraph, row);
            rows.push(row);
        }
        Ok(Var::concat(&rows, 0)?)
    }
}
