use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({x}, {y}) outside chart domain: {reason}")]
    ChartDomain { x: f64, y: f64, reason: String },

    #[error("chart coordinates degenerate after flowing {t} time units: {reason}")]
    ChartUnderflow { t: f64, reason: String },

    #[error("vectors attached to different base points: ({0:.6}, {1:.6}) vs ({2:.6}, {3:.6})")]
    BaseMismatch(f64, f64, f64, f64),

    #[error("states belong to different surface models")]
    ModelMismatch,

    #[error("basis not admissible: {0}")]
    NotAdmissible(String),

    #[error("degenerate tangent plane")]
    DegeneratePlane,

    #[error("zero vector where a direction is required")]
    ZeroVector,

    #[error("splitting estimate did not converge: residual {residual:.3e} above {threshold:.3e}")]
    SplittingFailure { residual: f64, threshold: f64 },

    #[error("iteration failed to converge in {stage}: {detail}")]
    NonConvergence { stage: &'static str, detail: String },

    #[error("numerical failure in {stage}: {detail}")]
    Numerical { stage: &'static str, detail: String },

    #[error("invalid argument for {stage}: {detail}")]
    InvalidArgument { stage: &'static str, detail: String },

    #[error("not enough samples for {stage}: need {need}, got {got}")]
    InsufficientSamples { stage: &'static str, need: usize, got: usize },

    #[error("indeterminate distance band covers {fraction:.1}% of samples at depth {depth}; widen the ball or tighten precision")]
    IndeterminateBand { fraction: f64, depth: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}
