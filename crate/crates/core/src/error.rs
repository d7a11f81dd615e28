use topoprune_numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("dataflow graph has a cycle through `{0}`")]
    Cycle(String),
    #[error("policy error: {0}")]
    Policy(String),
    #[error("strategy error: {0}")]
    Strategy(String),
    #[error("cannot lower model: {0}")]
    Lower(String),
    #[error("dimension error: {0}")]
    Dim(String),
    #[error("missing encoder parameters: {0}")]
    MissingParams(String),
    #[error("action has {got} entries, expected {expected}")]
    SlotMismatch { expected: usize, got: usize },
    #[error("replay buffer holds {have} transitions, {need} requested")]
    InsufficientBuffer { have: usize, need: usize },
    #[error("split `{0}` is empty")]
    EmptySplit(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("weights error: {0}")]
    Weights(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
