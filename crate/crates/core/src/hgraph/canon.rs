//! Canonical labeling of small typed DAGs by colour refinement plus
//! individualization, hashed with SHA-256.

use sha2::{Digest, Sha256};

use super::CompGraph;

type EdgeCode = (usize, usize, usize, Vec<u64>);

fn edge_sig(g: &CompGraph) -> Vec<(usize, usize, usize, Vec<u64>)> {
    g.edges
        .iter()
        .map(|e| {
            (
                e.src,
                e.dst,
                e.type_id,
                e.attr.iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

/// Replaces arbitrary sortable labels with their dense ranks.
fn rank<T: Ord + Clone>(labels: &[T]) -> Vec<usize> {
    let mut distinct: Vec<T> = labels.to_vec();
    distinct.sort();
    distinct.dedup();
    labels
        .iter()
        .map(|l| distinct.binary_search(l).unwrap())
        .collect()
}

fn num_cells(colors: &[usize]) -> usize {
    colors.iter().max().map_or(0, |m| m + 1)
}

/// Refines `colors` until stable. Every step is a function of the colours
/// alone, so the result is invariant under node relabeling.
fn refine(
    n: usize,
    edges: &[(usize, usize, usize, Vec<u64>)],
    mut colors: Vec<usize>,
) -> Vec<usize> {
    loop {
        let mut sigs: Vec<(usize, Vec<(usize, usize, Vec<u64>, usize)>)> =
            colors.iter().map(|&c| (c, Vec::new())).collect();
        for (s, d, t, a) in edges {
            // Direction tag 0: outgoing, 1: incoming.
            sigs[*s].1.push((0, *t, a.clone(), colors[*d]));
            sigs[*d].1.push((1, *t, a.clone(), colors[*s]));
        }
        for s in &mut sigs {
            s.1.sort();
        }
        let next = rank(&sigs);
        if num_cells(&next) == num_cells(&colors) || n == 0 {
            return next;
        }
        colors = next;
    }
}

fn encode_leaf(edges: &[(usize, usize, usize, Vec<u64>)], perm: &[usize]) -> Vec<EdgeCode> {
    let mut out: Vec<EdgeCode> = edges
        .iter()
        .map(|(s, d, t, a)| (perm[*s], perm[*d], *t, a.clone()))
        .collect();
    out.sort();
    out
}

fn search(
    n: usize,
    edges: &[(usize, usize, usize, Vec<u64>)],
    colors: Vec<usize>,
    best: &mut Option<Vec<EdgeCode>>,
) {
    let colors = refine(n, edges, colors);
    if num_cells(&colors) == n {
        let code = encode_leaf(edges, &colors);
        if best.as_ref().is_none_or(|b| code < *b) {
            *best = Some(code);
        }
        return;
    }
    // First non-singleton cell in colour order.
    let mut counts = vec![0usize; num_cells(&colors)];
    for &c in &colors {
        counts[c] += 1;
    }
    let target = counts.iter().position(|&k| k > 1).unwrap();
    for v in 0..n {
        if colors[v] != target {
            continue;
        }
        let split: Vec<(usize, usize)> = colors
            .iter()
            .enumerate()
            .map(|(u, &c)| (c, usize::from(c == target && u != v)))
            .collect();
        search(n, edges, rank(&split), best);
    }
}

/// Canonical edge code of `g`: the minimum over individualization leaves.
pub(super) fn canonical_code(g: &CompGraph) -> Vec<EdgeCode> {
    let edges = edge_sig(g);
    let mut best = None;
    search(g.num_nodes, &edges, vec![0; g.num_nodes], &mut best);
    best.unwrap_or_default()
}

pub(super) fn digest(g: &CompGraph) -> String {
    let code = canonical_code(g);
    let mut h = Sha256::new();
    h.update((g.num_nodes as u64).to_le_bytes());
    h.update((code.len() as u64).to_le_bytes());
    for (s, d, t, a) in &code {
        for x in [*s as u64, *d as u64, *t as u64, a.len() as u64] {
            h.update(x.to_le_bytes());
        }
        for x in a {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
