use std::path::PathBuf;

/// Errors produced by the pipeline stages.
///
/// Variants map onto the machine-readable categories the CLI reports:
/// missing inputs, contract violations, and training failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation was called with inputs violating its contract.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A covariance matrix stayed near-singular even after ridge addition.
    #[error("ill-conditioned covariance (smallest eigenvalue {min_eigenvalue:.3e}): {detail}")]
    Conditioning {
        min_eigenvalue: f64,
        detail: String,
    },

    /// A least-squares system was rank deficient.
    #[error("rank-deficient system: effective rank {effective} < required {required}")]
    RankDeficient { effective: usize, required: usize },

    /// Audio input had an unsupported sample rate (no implicit resampling).
    #[error("unsupported sample rate {got} Hz (expected {expected} Hz)")]
    UnsupportedRate { got: u32, expected: u32 },

    /// Input shorter than the minimum an operation can process.
    #[error("input too short: {detail}")]
    TooShort { detail: String },

    /// PCA found no deformation variance to model.
    #[error("empty basis: no deformation variance in the training meshes")]
    EmptyBasis,

    /// Every entry along a softmax line was masked out.
    #[error("degenerate mask: line {line} along the {axis} axis is fully masked")]
    DegenerateMask { line: usize, axis: &'static str },

    /// A warp path left target frames without any aligned source frame.
    #[error("uncovered target frames: {missing:?}")]
    Coverage { missing: Vec<usize> },

    /// Training produced a non-finite loss.
    #[error("training failure at step {step}: {detail}")]
    TrainingFailure { step: usize, detail: String },

    /// A referenced input file does not exist.
    #[error("missing input: {0}")]
    MissingInput(PathBuf),

    /// Malformed file contents (WAV, OBJ, manifest, blob).
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    /// Stable category tag used in CLI error reports and exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::MissingInput(_) => "missing-input",
            Error::TrainingFailure { .. } => "training-failure",
            Error::Io(_) | Error::Json(_) | Error::Format { .. } => "io",
            _ => "contract-violation",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
