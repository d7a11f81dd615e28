//! Channel pruning as an IR → IR transform.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{LayerKind, ModelIR, Src};
use crate::error::{Error, Result};

pub const DEFAULT_A_MAX: f64 = 0.8;

/// Per-layer pruning ratios. Prunable layers absent from `ratios` keep all
/// their channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPolicy {
    pub ratios: IndexMap<String, f64>,
    pub a_max: f64,
}

impl PruningPolicy {
    pub fn new(a_max: f64) -> Self {
        Self {
            ratios: IndexMap::new(),
            a_max,
        }
    }

    /// The same ratio on every prunable layer of `m`.
    pub fn uniform(m: &ModelIR, a: f64, a_max: f64) -> Self {
        let ratios = m.prunable_layers().map(|l| (l.id.clone(), a)).collect();
        Self { ratios, a_max }
    }

    pub fn ratio(&self, id: &str) -> f64 {
        self.ratios.get(id).copied().unwrap_or(0.0)
    }

    /// `layer,ratio` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,ratio\n");
        for (id, a) in &self.ratios {
            out.push_str(&format!("{id},{a}\n"));
        }
        out
    }

    fn validate(&self, m: &ModelIR) -> Result<()> {
        if !(self.a_max.is_finite() && (0.0..1.0).contains(&self.a_max)) {
            return Err(Error::Policy(format!(
                "a_max {} is outside [0, 1)",
                self.a_max
            )));
        }
        for (id, &a) in &self.ratios {
            let layer = m
                .layer(id)
                .ok_or_else(|| Error::Policy(format!("ratio for unknown layer `{id}`")))?;
            if !layer.prunable {
                return Err(Error::Policy(format!("layer `{id}` is not prunable")));
            }
            if !(a.is_finite() && a >= 0.0 && a <= self.a_max) {
                return Err(Error::Policy(format!(
                    "ratio {a} for `{id}` is outside [0, {}]",
                    self.a_max
                )));
            }
        }
        for group in m.share_groups() {
            let first = self.ratio(&group[0]);
            if let Some(other) = group.iter().find(|id| self.ratio(id) != first) {
                return Err(Error::Policy(format!(
                    "share group members `{}` and `{other}` have different ratios",
                    group[0]
                )));
            }
        }
        Ok(())
    }
}

/// Number of channels kept out of `channels` at ratio `a`.
pub fn keep_count(channels: usize, a: f64, multiple: usize) -> usize {
    let m = multiple.max(1);
    let units = ((1.0 - a) * channels as f64 / m as f64).round() as usize;
    (units.max(1) * m).min(channels)
}

fn squared_norm_rows(t: &topoprune_numerics::Tensor) -> Vec<f64> {
    let rows = t.shape()[0];
    let per = t.numel() / rows.max(1);
    t.data()
        .chunks(per.max(1))
        .take(rows)
        .map(|r| r.iter().map(|v| v * v).sum())
        .collect()
}

/// Indices of the `keep` largest scores, ties broken toward lower index,
/// returned in ascending order.
fn top_k(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

fn is_identity(list: &[usize], len: usize) -> bool {
    list.len() == len && list.iter().enumerate().all(|(i, &v)| i == v)
}

/// Prunes output channels per `p`, slicing weights when present.
pub fn apply_policy(m: &ModelIR, p: &PruningPolicy) -> Result<ModelIR> {
    apply_policy_traced(m, p).map(|(ir, _)| ir)
}

/// Like [`apply_policy`], also returning the surviving pre-pruning channel
/// indices of every layer that owns its channels.
pub fn apply_policy_traced(
    m: &ModelIR,
    p: &PruningPolicy,
) -> Result<(ModelIR, IndexMap<String, Vec<usize>>)> {
    p.validate(m)?;
    let layers = m.layers();
    let n = layers.len();

    // Kept output-channel indices per channel class, chosen once per class so
    // share-group members agree.
    let mut class_keep: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..n {
        let l = &layers[i];
        if !l.prunable {
            continue;
        }
        let class = m.channel_class(i);
        if class_keep.contains_key(&class) {
            continue;
        }
        let a = p.ratio(&l.id);
        let c = l.out_channels;
        let keep = keep_count(c, a, m.channel_multiple(i));
        let members: Vec<usize> = (0..n)
            .filter(|&j| layers[j].prunable && m.channel_class(j) == class)
            .collect();
        let weighted = members.iter().all(|&j| {
            layers[j]
                .weights
                .as_ref()
                .is_some_and(|w| w.contains_key("weight"))
        });
        let chosen = if keep == c {
            (0..c).collect()
        } else if weighted {
            let mut scores = vec![0.0; c];
            for &j in &members {
                let w = &layers[j].weights.as_ref().unwrap()["weight"];
                for (s, v) in scores.iter_mut().zip(squared_norm_rows(w)) {
                    *s += v;
                }
            }
            top_k(&scores, keep)
        } else {
            (0..keep).collect()
        };
        class_keep.insert(class, chosen);
    }

    // Ordered provenance: which pre-pruning output channels each layer keeps.
    let mut kept: Vec<Vec<usize>> = Vec::with_capacity(n);
    let input_list: Vec<usize> = (0..m.input_shape().0).collect();
    let list_of = |kept: &Vec<Vec<usize>>, s: Src| -> Vec<usize> {
        match s {
            Src::Input => input_list.clone(),
            Src::Layer(j) => kept[j].clone(),
        }
    };
    for i in 0..n {
        let l = &layers[i];
        let ins = m.inputs_of(i);
        let list = match l.kind {
            LayerKind::Conv2d | LayerKind::PointwiseConv2d | LayerKind::Dense => {
                if l.prunable {
                    class_keep[&m.channel_class(i)].clone()
                } else {
                    (0..l.out_channels).collect()
                }
            }
            LayerKind::Concat => {
                let mut out = Vec::new();
                let mut offset = 0;
                for &s in ins {
                    out.extend(list_of(&kept, s).into_iter().map(|c| c + offset));
                    offset += match s {
                        Src::Input => m.input_shape().0,
                        Src::Layer(j) => layers[j].out_channels,
                    };
                }
                out
            }
            LayerKind::Flatten => {
                let (_, h, w) = match ins[0] {
                    Src::Input => m.input_shape(),
                    Src::Layer(j) => layers[j].out_shape(),
                };
                let hw = h * w;
                list_of(&kept, ins[0])
                    .into_iter()
                    .flat_map(|c| (0..hw).map(move |k| c * hw + k))
                    .collect()
            }
            LayerKind::ChannelShuffle => {
                let src = list_of(&kept, ins[0]);
                let g = l.groups;
                let c = l.out_channels;
                let c_new = src.len();
                let inv = |q: usize| (q % (c / g)) * g + q / (c / g);
                (0..c_new)
                    .map(|p| inv(src[(p % g) * (c_new / g) + p / g]))
                    .collect()
            }
            _ => list_of(&kept, ins[0]),
        };
        kept.push(list);
    }

    let mut new_layers = Vec::with_capacity(n);
    for i in 0..n {
        let mut l = layers[i].clone();
        let in_list = list_of(&kept, m.inputs_of(i)[0]);
        let in_identity = is_identity(&in_list, l.in_channels);
        let out_identity = is_identity(&kept[i], l.out_channels);
        if let Some(w) = l.weights.as_mut() {
            match l.kind {
                LayerKind::Conv2d | LayerKind::PointwiseConv2d | LayerKind::Dense => {
                    if !out_identity {
                        for t in w.values_mut() {
                            *t = t.select(0, &kept[i])?;
                        }
                    }
                    if !in_identity {
                        let t = w.get_mut("weight").expect("weight slot");
                        *t = t.select(1, &in_list)?;
                    }
                }
                LayerKind::DepthwiseConv2d | LayerKind::Batchnorm => {
                    if !in_identity {
                        for t in w.values_mut() {
                            *t = t.select(0, &in_list)?;
                        }
                    }
                }
                _ => {}
            }
        }
        if l.prunable {
            let a = p.ratio(&l.id);
            if a > 0.0 {
                l.pruned_fraction = 1.0 - (1.0 - l.pruned_fraction) * (1.0 - a);
            }
        }
        if l.kind.sets_channels() {
            l.out_channels = kept[i].len();
        } else {
            l.out_channels = 0;
        }
        l.in_channels = 0;
        l.out_hw = (0, 0);
        new_layers.push(l);
    }
    let trace = layers
        .iter()
        .zip(&kept)
        .filter(|(l, _)| l.kind.sets_channels())
        .map(|(l, k)| (l.id.clone(), k.clone()))
        .collect();
    let ir = ModelIR::rebuild(
        m.input_shape(),
        new_layers,
        m.edges().to_vec(),
        m.blocks().to_vec(),
        m.share_groups().to_vec(),
    )?;
    Ok((ir, trace))
}
