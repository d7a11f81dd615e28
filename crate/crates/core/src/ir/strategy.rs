//! Per-block-kind pruning eligibility, channel-sharing analysis and the
//! mapping from agent slots to layer ratios.

use std::collections::BTreeMap;

use indexmap::IndexMap;

use super::prune::{PruningPolicy, DEFAULT_A_MAX};
use super::{BlockKind, LayerKind, ModelIR, Src};
use crate::error::{Error, Result};

/// Union-find over channel spaces. Node 0 is the network input.
struct Classes {
    parent: Vec<usize>,
}

impl Classes {
    fn new() -> Self {
        Self { parent: vec![0] }
    }

    fn fresh(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a != b {
            let (lo, hi) = (a.min(b), a.max(b));
            self.parent[hi] = lo;
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

fn passthrough(kind: LayerKind) -> bool {
    matches!(
        kind,
        LayerKind::Relu
            | LayerKind::Batchnorm
            | LayerKind::Maxpool
            | LayerKind::Avgpool
            | LayerKind::GlobalAvgpool
            | LayerKind::DepthwiseConv2d
            | LayerKind::ChannelShuffle
            | LayerKind::Flatten
            | LayerKind::Add
    )
}

/// Layers that produce a block's output channels: walk back from the block
/// output through channel-preserving layers, staying inside the block.
fn output_producers(ir: &ModelIR, block: usize) -> Vec<usize> {
    let spec = &ir.blocks[block];
    let mut stack = ir.block_outputs(spec);
    let mut found = Vec::new();
    let mut seen = vec![false; ir.layers.len()];
    while let Some(i) = stack.pop() {
        if std::mem::replace(&mut seen[i], true) || ir.derived.block_of[i] != Some(block) {
            continue;
        }
        let kind = ir.layers[i].kind;
        if kind.sets_channels() {
            found.push(i);
        } else if (passthrough(kind) && kind != LayerKind::DepthwiseConv2d)
            || kind == LayerKind::Concat
        {
            for &s in &ir.derived.inputs[i] {
                if let Src::Layer(p) = s {
                    stack.push(p);
                }
            }
        }
    }
    found.sort_unstable();
    found
}

/// Strategy eligibility of layer `i` given its enclosing block kind.
fn eligible(ir: &ModelIR, i: usize, excluded: &[bool]) -> bool {
    let l = &ir.layers[i];
    let kind_ok = match l.kind {
        LayerKind::Conv2d => l.groups == 1,
        LayerKind::PointwiseConv2d => l.groups == 1,
        _ => false,
    };
    if !kind_ok || !l.prunable || excluded[i] {
        return false;
    }
    match ir.derived.block_of[i].map(|b| ir.blocks[b].kind) {
        Some(BlockKind::MobileV1) | Some(BlockKind::MobileV2) => {
            l.kind == LayerKind::PointwiseConv2d
        }
        _ => true,
    }
}

/// Resolves prunable flags, share groups, channel multiples and agent slots.
pub(super) fn resolve(ir: &mut ModelIR) -> Result<()> {
    let n = ir.layers.len();
    let mut uf = Classes::new();
    let mut node = vec![0usize; n];
    let mut concat_nodes: Vec<(usize, usize)> = Vec::new();
    let src_node = |node: &[usize], s: Src| match s {
        Src::Input => 0,
        Src::Layer(p) => node[p],
    };
    for i in 0..n {
        let kind = ir.layers[i].kind;
        let ins = &ir.derived.inputs[i];
        node[i] = if kind.sets_channels() {
            uf.fresh()
        } else if kind == LayerKind::Concat {
            let c = uf.fresh();
            concat_nodes.push((i, c));
            c
        } else {
            let first = src_node(&node, ins[0]);
            for &s in &ins[1..] {
                let other = src_node(&node, s);
                uf.union(first, other);
            }
            first
        };
    }

    // Explicit share groups tie their members' channel spaces.
    let mut explicit_member = vec![false; n];
    for group in &ir.share_groups {
        let mut first: Option<usize> = None;
        for id in group {
            let &i =
                ir.derived.index.get(id).ok_or_else(|| {
                    Error::Schema(format!("share group names unknown layer `{id}`"))
                })?;
            if !ir.layers[i].kind.sets_channels() {
                return Err(Error::Schema(format!(
                    "share group member `{id}` does not own its channels"
                )));
            }
            if std::mem::replace(&mut explicit_member[i], true) {
                return Err(Error::Schema(format!(
                    "layer `{id}` is in more than one share group"
                )));
            }
            match first {
                None => first = Some(i),
                Some(f) => {
                    if ir.layers[f].out_channels != ir.layers[i].out_channels {
                        return Err(Error::Schema(format!(
                            "share group mixes {} and {} channels (`{}`, `{id}`)",
                            ir.layers[f].out_channels, ir.layers[i].out_channels, ir.layers[f].id
                        )));
                    }
                    uf.union(node[f], node[i]);
                }
            }
        }
    }

    let total = uf.parent.len();
    let mut fixed = vec![false; total];
    let mut multiple = vec![1usize; total];
    fixed[uf.find(0)] = true;
    let sink_root = uf.find(node[ir.derived.sink]);
    fixed[sink_root] = true;
    for i in 0..n {
        let l = &ir.layers[i];
        let grouped =
            matches!(l.kind, LayerKind::Conv2d | LayerKind::PointwiseConv2d) && l.groups > 1;
        if grouped {
            let r = uf.find(src_node(&node, ir.derived.inputs[i][0]));
            fixed[r] = true;
        }
        if l.kind == LayerKind::ChannelShuffle {
            let r = uf.find(node[i]);
            multiple[r] = lcm(multiple[r], l.groups);
        }
    }
    // A concat whose space is tied to anything else pins its inputs.
    let mut members_per_root: BTreeMap<usize, usize> = BTreeMap::new();
    for x in 0..total {
        *members_per_root.entry(uf.find(x)).or_default() += 1;
    }
    loop {
        let mut changed = false;
        for &(i, c) in &concat_nodes {
            let r = uf.find(c);
            if members_per_root[&r] > 1 && !fixed[r] {
                fixed[r] = true;
                changed = true;
            }
            if fixed[r] {
                for &s in &ir.derived.inputs[i] {
                    let sr = uf.find(src_node(&node, s));
                    if !fixed[sr] {
                        fixed[sr] = true;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut excluded = vec![false; n];
    let mut projection_tie: Vec<usize> = Vec::new();
    for b in 0..ir.blocks.len() {
        match ir.blocks[b].kind {
            BlockKind::Shuffle => {
                for p in output_producers(ir, b) {
                    excluded[p] = true;
                }
            }
            BlockKind::MobileV2 => projection_tie.extend(output_producers(ir, b)),
            _ => {}
        }
    }

    let mut class_ok: Vec<bool> = (0..total).map(|r| !fixed[r]).collect();
    for i in 0..n {
        if ir.layers[i].kind.sets_channels() && !eligible(ir, i, &excluded) {
            let r = uf.find(node[i]);
            class_ok[r] = false;
        }
    }

    let mut class_of = vec![0usize; n];
    let mut layer_multiple = vec![1usize; n];
    let mut by_class: IndexMap<usize, Vec<usize>> = IndexMap::new();
    for i in 0..n {
        let r = uf.find(node[i]);
        class_of[i] = r;
        layer_multiple[i] = multiple[r];
        let l = &mut ir.layers[i];
        if l.kind.sets_channels() {
            l.prunable = class_ok[r];
            by_class.entry(r).or_default().push(i);
        } else {
            l.prunable = false;
        }
    }

    // Canonical share groups: every prunable multi-member class, plus any
    // class carrying an explicit group.
    let mut groups = Vec::new();
    for (_, members) in &by_class {
        let explicit = members.iter().any(|&i| explicit_member[i]);
        let prunable = ir.layers[members[0]].prunable;
        if members.len() > 1 && (prunable || explicit) {
            groups.push(members.iter().map(|&i| ir.layers[i].id.clone()).collect());
        }
    }
    ir.share_groups = groups;

    // Slots: prunable classes in topological order of their first member,
    // with mobile-v2 projection layers additionally tied to one ratio.
    let tie: Vec<usize> = projection_tie
        .into_iter()
        .filter(|&i| ir.layers[i].prunable)
        .collect();
    let mut slots: Vec<Vec<usize>> = Vec::new();
    let mut tie_slot: Option<usize> = None;
    for (_, members) in &by_class {
        if !ir.layers[members[0]].prunable {
            continue;
        }
        if members.iter().any(|i| tie.contains(i)) {
            match tie_slot {
                Some(s) => slots[s].extend(members.iter().copied()),
                None => {
                    tie_slot = Some(slots.len());
                    slots.push(members.clone());
                }
            }
        } else {
            slots.push(members.clone());
        }
    }
    for s in &mut slots {
        s.sort_unstable();
    }

    ir.derived.class_of = class_of;
    ir.derived.multiple = layer_multiple;
    ir.derived.slots = slots;
    Ok(())
}

/// Maps one agent output per slot onto the layers each slot controls.
pub fn strategy_ratios(m: &ModelIR, raw: &[f64]) -> Result<PruningPolicy> {
    let slots = m.slots();
    if raw.len() != slots.len() {
        return Err(Error::Strategy(format!(
            "{} agent outputs for {} slots",
            raw.len(),
            slots.len()
        )));
    }
    let mut ratios = IndexMap::new();
    for (slot, &a) in slots.iter().zip(raw) {
        for &i in slot {
            ratios.insert(m.layers[i].id.clone(), a);
        }
    }
    Ok(PruningPolicy {
        ratios,
        a_max: DEFAULT_A_MAX,
    })
}

impl ModelIR {
    /// Agent-controlled slots as layer indices, in topological order.
    pub fn slots(&self) -> &[Vec<usize>] {
        &self.derived.slots
    }

    pub fn num_slots(&self) -> usize {
        self.derived.slots.len()
    }

    /// Slot membership by layer id.
    pub fn slot_ids(&self) -> Vec<Vec<String>> {
        self.derived
            .slots
            .iter()
            .map(|s| s.iter().map(|&i| self.layers[i].id.clone()).collect())
            .collect()
    }

    /// Kept channel counts of layer `i` must be a multiple of this.
    pub fn channel_multiple(&self, i: usize) -> usize {
        self.derived.multiple[i]
    }

    pub(crate) fn channel_class(&self, i: usize) -> usize {
        self.derived.class_of[i]
    }
}
