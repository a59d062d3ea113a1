use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("Riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("policy precision 2(R + B'PB) is not positive definite")]
    SingularH,

    #[error("closed-loop matrix has spectral radius {0} >= 1")]
    UnstableClosedLoop(f64),

    #[error("unsupported internal-model role: {0}")]
    UnsupportedRole(String),

    #[error("internal model variant does not match environment: {0}")]
    VariantMismatch(String),

    #[error("belief update underflowed for every goal")]
    DegenerateBelief,

    #[error("network output size {net} does not match internal-model dimension {env}")]
    ShapeMismatch { net: usize, env: usize },

    #[error("training diverged: loss non-finite for {0} consecutive epochs")]
    Diverged(usize),

    #[error("corpus has no ground-truth internal-model trace")]
    MissingGroundTruth,

    #[error("unknown robot strategy: {0}")]
    UnknownKind(String),

    #[error("unknown environment: {0}")]
    UnknownEnv(String),

    #[error("planning budget exceeded after {iterations} iterations")]
    PlanningBudgetExceeded {
        iterations: usize,
        best: Box<crate::planner::Plan>,
    },

    #[error("stale input for tick {got} (current tick {current})")]
    StaleTick { got: u64, current: u64 },

    #[error("session has ended")]
    SessionEnded,

    #[error("session has not ended")]
    SessionNotEnded,

    #[error("port {0} is already in use")]
    PortInUse(u16),

    #[error("strategy {0} needs a trained checkpoint")]
    CheckpointRequired(String),

    #[error("{0} already exists (pass --force to overwrite)")]
    OutputExists(std::path::PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
