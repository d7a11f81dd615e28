//! Two-level hierarchical computational graphs.
//!
//! Level 0 is the primitive table (one entry per layer kind, one-hot
//! features). Level 1 holds one graph per distinct block: nodes are the block's
//! input tensors and layer outputs, edges are layers typed by primitive.
//! Level 2 is the network: nodes are block-boundary tensors and every block
//! instance is an edge typed by its motif, carrying a compression-state
//! attribute vector.

mod canon;

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{LayerKind, ModelIR, Src};

/// Width of level-1 edge attributes: kernel (h, w) and stride (h, w).
pub const MOTIF_ATTR_DIM: usize = 4;
/// Width of level-2 edge attributes: input width, output width, kernel area,
/// stride, cumulative pruned fraction.
pub const TOP_ATTR_DIM: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompEdge {
    pub src: usize,
    pub dst: usize,
    pub type_id: usize,
    pub attr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompGraph {
    pub level: usize,
    pub num_nodes: usize,
    pub edges: Vec<CompEdge>,
    pub attr_dim: usize,
}

impl CompGraph {
    pub fn new(level: usize, num_nodes: usize, attr_dim: usize) -> Self {
        Self {
            level,
            num_nodes,
            edges: Vec::new(),
            attr_dim,
        }
    }

    pub fn add_edge(&mut self, src: usize, dst: usize, type_id: usize, attr: Vec<f64>) {
        debug_assert_eq!(attr.len(), self.attr_dim);
        self.edges.push(CompEdge {
            src,
            dst,
            type_id,
            attr,
        });
    }

    /// In-neighbour edges of every node, as edge indices.
    pub fn in_edges(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_nodes];
        for (k, e) in self.edges.iter().enumerate() {
            out[e.dst].push(k);
        }
        out
    }

    /// Same graph with nodes renamed by `perm[old] = new` and edges reordered.
    pub fn permuted(&self, perm: &[usize], edge_order: &[usize]) -> CompGraph {
        let mut g = CompGraph::new(self.level, self.num_nodes, self.attr_dim);
        for &k in edge_order {
            let e = &self.edges[k];
            g.add_edge(perm[e.src], perm[e.dst], e.type_id, e.attr.clone());
        }
        g
    }

    /// Number of edges on the longest directed path (graph must be a DAG).
    pub fn longest_path(&self) -> usize {
        let mut indeg = vec![0usize; self.num_nodes];
        let mut succ = vec![Vec::new(); self.num_nodes];
        for e in &self.edges {
            indeg[e.dst] += 1;
            succ[e.src].push(e.dst);
        }
        let mut depth = vec![0usize; self.num_nodes];
        let mut stack: Vec<usize> = (0..self.num_nodes).filter(|&v| indeg[v] == 0).collect();
        while let Some(v) = stack.pop() {
            for &w in &succ[v] {
                depth[w] = depth[w].max(depth[v] + 1);
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    stack.push(w);
                }
            }
        }
        depth.into_iter().max().unwrap_or(0)
    }

    pub fn is_dag(&self) -> bool {
        let mut indeg = vec![0usize; self.num_nodes];
        let mut succ = vec![Vec::new(); self.num_nodes];
        for e in &self.edges {
            indeg[e.dst] += 1;
            succ[e.src].push(e.dst);
        }
        let mut stack: Vec<usize> = (0..self.num_nodes).filter(|&v| indeg[v] == 0).collect();
        let mut seen = 0;
        while let Some(v) = stack.pop() {
            seen += 1;
            for &w in &succ[v] {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    stack.push(w);
                }
            }
        }
        seen == self.num_nodes
    }
}

/// SHA-256 of a canonical form of a typed, attributed DAG.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MotifKey(pub String);

pub fn canonical_key(g: &CompGraph) -> MotifKey {
    MotifKey(canon::digest(g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: LayerKind,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    pub key: MotifKey,
    pub graph: CompGraph,
    /// Names of the blocks this motif was extracted from.
    pub instances: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierGraph {
    pub primitives: Vec<Primitive>,
    /// Level-1 table; empty for a flat (single-level) hierarchy.
    pub motifs: Vec<Motif>,
    pub top: CompGraph,
}

/// The full primitive table: every layer kind with a one-hot feature.
pub fn primitive_table() -> Vec<Primitive> {
    primitives_for(&LayerKind::ALL)
}

pub fn primitives_for(kinds: &[LayerKind]) -> Vec<Primitive> {
    kinds
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let mut feature = vec![0.0; kinds.len()];
            feature[i] = 1.0;
            Primitive { kind, feature }
        })
        .collect()
}

/// Groups graphs by canonical key in first-appearance order; returns the
/// distinct table and the table index of every input graph.
pub fn dedupe(graphs: Vec<(String, CompGraph)>) -> (Vec<Motif>, Vec<usize>) {
    let mut table: Vec<Motif> = Vec::new();
    let mut by_key: HashMap<MotifKey, usize> = HashMap::new();
    let mut refs = Vec::with_capacity(graphs.len());
    for (name, g) in graphs {
        let key = canonical_key(&g);
        let idx = *by_key.entry(key.clone()).or_insert_with(|| {
            table.push(Motif {
                key,
                graph: g,
                instances: Vec::new(),
            });
            table.len() - 1
        });
        table[idx].instances.push(name);
        refs.push(idx);
    }
    (table, refs)
}

struct Unit {
    name: String,
    members: Vec<usize>,
}

/// Blocks plus one singleton unit per unblocked layer, ordered by first
/// member.
fn units(m: &ModelIR) -> Vec<Unit> {
    let mut units: Vec<Unit> = Vec::new();
    let mut unit_of_block: HashMap<usize, usize> = HashMap::new();
    for i in 0..m.layers().len() {
        match m.block_of(i) {
            Some(b) => {
                let u = *unit_of_block.entry(b).or_insert_with(|| {
                    units.push(Unit {
                        name: m.blocks()[b].name.clone(),
                        members: Vec::new(),
                    });
                    units.len() - 1
                });
                units[u].members.push(i);
            }
            None => units.push(Unit {
                name: m.layers()[i].id.clone(),
                members: vec![i],
            }),
        }
    }
    units
}

fn kind_index(table: &[Primitive], kind: LayerKind) -> Result<usize> {
    table.iter().position(|p| p.kind == kind).ok_or_else(|| {
        Error::Lower(format!(
            "layer kind `{}` is not in the primitive table",
            kind.name()
        ))
    })
}

fn unit_inputs(m: &ModelIR, members: &[usize]) -> Vec<Src> {
    let mut out = Vec::new();
    for &i in members {
        for &s in m.inputs_of(i) {
            let inside = matches!(s, Src::Layer(p) if members.contains(&p));
            if !inside && !out.contains(&s) {
                out.push(s);
            }
        }
    }
    out
}

fn motif_graph(
    m: &ModelIR,
    members: &[usize],
    table: &[Primitive],
) -> Result<(CompGraph, Vec<Src>)> {
    let inputs = unit_inputs(m, members);
    let mut g = CompGraph::new(1, inputs.len() + members.len(), MOTIF_ATTR_DIM);
    let node_of = |s: Src| -> usize {
        match s {
            Src::Layer(p) if members.contains(&p) => {
                inputs.len() + members.iter().position(|&q| q == p).unwrap()
            }
            other => inputs.iter().position(|&q| q == other).unwrap(),
        }
    };
    for (k, &i) in members.iter().enumerate() {
        let l = &m.layers()[i];
        let t = kind_index(table, l.kind)?;
        let attr = vec![
            l.kernel.0 as f64,
            l.kernel.1 as f64,
            l.stride.0 as f64,
            l.stride.1 as f64,
        ];
        for &s in m.inputs_of(i) {
            g.add_edge(node_of(s), inputs.len() + k, t, attr.clone());
        }
    }
    Ok((g, inputs))
}

fn unit_output(m: &ModelIR, members: &[usize]) -> usize {
    let sink = m.output_layer();
    *members
        .iter()
        .find(|&&i| i == sink || m.consumers_of(i).iter().any(|c| !members.contains(c)))
        .expect("validated blocks have one output")
}

/// Lowers with the full primitive table.
pub fn lower(m: &ModelIR) -> Result<HierGraph> {
    lower_with(m, primitive_table())
}

/// Lowers against a caller-supplied primitive table.
pub fn lower_with(m: &ModelIR, primitives: Vec<Primitive>) -> Result<HierGraph> {
    let units = units(m);
    let layers = m.layers();
    let max_channels = layers
        .iter()
        .map(|l| l.original_out_channels.max(l.original_in_channels))
        .chain(std::iter::once(m.input_shape().0))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let max_area = layers
        .iter()
        .filter(|l| l.kind.is_conv())
        .map(|l| l.kernel.0 * l.kernel.1)
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let max_stride = layers
        .iter()
        .map(|l| l.stride.0.max(l.stride.1))
        .max()
        .unwrap_or(1)
        .max(1) as f64;

    let mut graphs = Vec::with_capacity(units.len());
    let mut unit_inputs_all = Vec::with_capacity(units.len());
    for u in &units {
        let (g, inputs) = motif_graph(m, &u.members, &primitives)?;
        graphs.push((u.name.clone(), g));
        unit_inputs_all.push(inputs);
    }
    let (motifs, refs) = dedupe(graphs);

    // Level-2 nodes: the model input, then each unit's output tensor.
    let outputs: Vec<usize> = units.iter().map(|u| unit_output(m, &u.members)).collect();
    let mut top = CompGraph::new(2, 1 + units.len(), TOP_ATTR_DIM);
    let node_of_src = |s: Src| -> Result<usize> {
        match s {
            Src::Input => Ok(0),
            Src::Layer(p) => outputs
                .iter()
                .position(|&o| o == p)
                .map(|u| 1 + u)
                .ok_or_else(|| {
                    Error::Lower(format!(
                        "layer `{}` is consumed outside its block but is not the block output",
                        layers[p].id
                    ))
                }),
        }
    };
    for (u, unit) in units.iter().enumerate() {
        let out_ch = layers[outputs[u]].out_channels as f64;
        let convs: Vec<&_> = unit
            .members
            .iter()
            .map(|&i| &layers[i])
            .filter(|l| l.kind.is_conv())
            .collect();
        let area = if convs.is_empty() {
            0.0
        } else {
            convs
                .iter()
                .map(|l| (l.kernel.0 * l.kernel.1) as f64)
                .sum::<f64>()
                / convs.len() as f64
        };
        let stride = unit
            .members
            .iter()
            .map(|&i| layers[i].stride.0.max(layers[i].stride.1))
            .max()
            .unwrap_or(1) as f64;
        let prunable: Vec<f64> = unit
            .members
            .iter()
            .map(|&i| &layers[i])
            .filter(|l| l.kind.sets_channels() && (l.prunable || l.pruned_fraction > 0.0))
            .map(|l| l.pruned_fraction)
            .collect();
        let pruned = if prunable.is_empty() {
            0.0
        } else {
            prunable.iter().sum::<f64>() / prunable.len() as f64
        };
        for &s in &unit_inputs_all[u] {
            let in_ch = match s {
                Src::Input => m.input_shape().0,
                Src::Layer(p) => layers[p].out_channels,
            } as f64;
            let attr = vec![
                in_ch / max_channels,
                out_ch / max_channels,
                area / max_area,
                stride / max_stride,
                pruned,
            ];
            top.add_edge(node_of_src(s)?, 1 + u, refs[u], attr);
        }
    }
    Ok(HierGraph {
        primitives,
        motifs,
        top,
    })
}

/// Single-level hierarchy: one graph whose edges are layers typed directly by
/// primitive, attributed like level-1 edges.
pub fn lower_flat(m: &ModelIR) -> Result<HierGraph> {
    let primitives = primitive_table();
    let all: Vec<usize> = (0..m.layers().len()).collect();
    let (mut top, _) = motif_graph(m, &all, &primitives)?;
    top.level = 1;
    Ok(HierGraph {
        primitives,
        motifs: Vec::new(),
        top,
    })
}

impl HierGraph {
    pub fn is_flat(&self) -> bool {
        self.motifs.is_empty()
    }

    /// Table size the top graph's edge types index into.
    pub fn type_table_len(&self) -> usize {
        if self.is_flat() {
            self.primitives.len()
        } else {
            self.motifs.len()
        }
    }

    /// Every edge type at every level resolves into the level below.
    pub fn resolves(&self) -> bool {
        let motif_ok = self.motifs.iter().all(|mo| {
            mo.graph.edges.iter().all(|e| {
                e.type_id < self.primitives.len()
                    && e.src < mo.graph.num_nodes
                    && e.dst < mo.graph.num_nodes
            })
        });
        let top_ok = self.top.edges.iter().all(|e| {
            e.type_id < self.type_table_len()
                && e.src < self.top.num_nodes
                && e.dst < self.top.num_nodes
        });
        motif_ok && top_ok
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("hierarchy serializes") + "\n"
    }

    /// Graphviz text for level `level` (1 = motif table as clusters, 2 = top).
    pub fn to_dot(&self, level: usize) -> String {
        let mut s = String::new();
        let type_name = |t: usize, lvl: usize| -> String {
            if lvl == 1 || self.is_flat() {
                self.primitives[t].kind.name().to_string()
            } else {
                format!("motif{t}")
            }
        };
        let _ = writeln!(s, "digraph level{level} {{");
        if level == 1 && !self.is_flat() {
            for (k, mo) in self.motifs.iter().enumerate() {
                let _ = writeln!(s, "  subgraph cluster_motif{k} {{");
                let _ = writeln!(s, "    label=\"motif{k} {}\";", &mo.key.0[..12]);
                for v in 0..mo.graph.num_nodes {
                    let _ = writeln!(s, "    m{k}_{v} [label=\"{v}\"];");
                }
                for e in &mo.graph.edges {
                    let _ = writeln!(
                        s,
                        "    m{k}_{} -> m{k}_{} [label=\"{}\"];",
                        e.src,
                        e.dst,
                        type_name(e.type_id, 1)
                    );
                }
                let _ = writeln!(s, "  }}");
            }
        } else {
            for v in 0..self.top.num_nodes {
                let _ = writeln!(s, "  n{v};");
            }
            for e in &self.top.edges {
                let attrs: Vec<String> = e.attr.iter().map(|a| format!("{a:.3}")).collect();
                let _ = writeln!(
                    s,
                    "  n{} -> n{} [label=\"{} [{}]\"];",
                    e.src,
                    e.dst,
                    type_name(e.type_id, self.top.level),
                    attrs.join(", ")
                );
            }
        }
        s.push_str("}\n");
        s
    }
}
