pub mod agent;
pub mod environment;
pub mod error;
pub mod hgraph;
pub mod ir;
pub mod mgnn;
pub mod oracle;

pub use error::{Error, Result};
pub use ir::{
    apply_policy, count_flops, parse_model, strategy_ratios, FlopsReport, LayerKind, ModelIR,
    PruningPolicy,
};
