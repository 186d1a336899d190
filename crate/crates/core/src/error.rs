//! Error type shared by all modules.
//!
//! Errors split into two classes that the command-line layer maps onto
//! process exit codes: input/validation problems (exit 2) and numeric
//! failures such as divergence or non-finite values (exit 3).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("node id {id} out of range for a graph with {nodes} nodes")]
    NodeOutOfRange { id: usize, nodes: usize },

    #[error("graph must have at least one node")]
    EmptyGraph,

    #[error("node {node} has degree zero; {operator} is undefined")]
    ZeroDegree { node: usize, operator: &'static str },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("label {value} at node {node} is outside {{-1, 0, 1}}")]
    BadLabel { node: usize, value: i64 },

    #[error("Rayleigh quotient undefined: signal has zero energy")]
    ZeroSignal,

    #[error("scaled Laplacian needs a positive spectral bound, got {0}")]
    NonPositiveSpectralBound(f64),

    #[error("loss became non-finite ({context})")]
    NonFiniteLoss { context: String },

    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("edge probability {p:.6} for pair ({i}, {j}) exceeds 1; shrink rates or weight bounds")]
    EdgeProbabilityTooLarge { i: usize, j: usize, p: f64 },

    #[error("class means coincide; separator direction is undefined")]
    CoincidentMeans,

    #[error("mean vector norm {norm:.6} exceeds the unit bound")]
    MeanNormTooLarge { norm: f64 },

    #[error("split needs {need} {class} nodes but only {have} are labeled")]
    SplitTooSmall {
        class: &'static str,
        need: usize,
        have: usize,
    },

    #[error("validation set is empty; model selection needs labeled validation nodes")]
    EmptyValidation,

    #[error("{metric} undefined: {reason}")]
    MetricUndefined {
        metric: &'static str,
        reason: String,
    },

    #[error("{file}:{line}: {msg}")]
    BundleFormat {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("{failed} of {total} gradient checks exceeded tolerance (worst: `{worst}`)")]
    GradientCheckFailed {
        failed: usize,
        total: usize,
        worst: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{stage} stage failed for seed {seed}: {source}")]
    Trial {
        stage: &'static str,
        seed: u64,
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code class: 2 for validation problems, 3 for numeric
    /// failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::NonFiniteLoss { .. }
            | Error::NonFiniteGradient { .. }
            | Error::ZeroSignal
            | Error::GradientCheckFailed { .. }
            | Error::NonPositiveSpectralBound(_) => 3,
            Error::Trial { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
