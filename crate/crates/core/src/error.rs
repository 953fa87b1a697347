use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid spec: {0}")]
    InvalidGrid(String),
    #[error("cell {cell} out of range for grid of {cells} cells")]
    CellOutOfRange { cell: usize, cells: usize },
    #[error("attack component {index} has magnitude {value} > 1.0")]
    AttackOutOfBounds { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("no target path of {moves} moves exists from {start} to {goal}")]
    NoTargetPath { start: usize, goal: usize, moves: usize },
    #[error("empty target state set")]
    EmptyTarget,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("power iteration did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("replay buffer holds {have} transitions, batch needs {need}")]
    InsufficientBuffer { have: usize, need: usize },
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed weight file: {0}")]
    WeightFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
