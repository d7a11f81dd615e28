use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerSpec, ModelIR};

/// Floating-point operation counts at two ops per multiply-accumulate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_layer: IndexMap<String, u64>,
    pub total: u64,
    pub prunable_total: u64,
}

impl FlopsReport {
    /// Preserved fraction of `baseline`'s total.
    pub fn ratio_to(&self, baseline: &FlopsReport) -> f64 {
        if baseline.total == 0 {
            return 1.0;
        }
        self.total as f64 / baseline.total as f64
    }
}

fn layer_flops(l: &LayerSpec) -> u64 {
    let (kh, kw) = l.kernel;
    let (ho, wo) = l.out_hw;
    match l.kind {
        LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::PointwiseConv2d => {
            2 * (kh * kw * (l.in_channels / l.groups) * l.out_channels * ho * wo) as u64
        }
        LayerKind::Dense => 2 * (l.in_channels * l.out_channels) as u64,
        _ => 0,
    }
}

pub fn count_flops(m: &ModelIR) -> FlopsReport {
    let mut per_layer = IndexMap::new();
    let mut total = 0;
    let mut prunable_total = 0;
    for l in m.layers() {
        let f = layer_flops(l);
        per_layer.insert(l.id.clone(), f);
        total += f;
        if l.prunable {
            prunable_total += f;
        }
    }
    FlopsReport {
        per_layer,
        total,
        prunable_total,
    }
}

pub fn count_params(m: &ModelIR) -> usize {
    m.param_counts().values().sum()
}
