use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("binomial({n_z} + {degree}, {degree}) overflows u64")]
    MonomialCountOverflow { n_z: usize, degree: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("series of length {len} is too short for order {order}: need at least {min}")]
    SeriesTooShort { len: usize, order: usize, min: usize },

    #[error("no valid samples left after trimming")]
    EmptyValidSet,

    #[error("too few usable samples for order {order}: {got} < {min}")]
    TooFewSamples { order: usize, got: usize, min: usize },

    #[error("integration produced a non-finite state at step {step}")]
    IntegrationDiverged { step: usize },

    #[error("closed loop diverged at t = {t:.4} s (y = {y:e})")]
    ClosedLoopDiverged { t: f64, y: f64 },

    #[error("observer update is not finite at step {step}")]
    ObserverDiverged { step: usize },

    #[error("singular linear system in {0}")]
    Singular(&'static str),

    #[error("pole {0} is not strictly in the left half plane")]
    UnstablePole(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            msg: msg.into(),
        }
    }

    /// Short stable identifier used by the command-line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::MonomialCountOverflow { .. } => "overflow",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::SeriesTooShort { .. } => "series_too_short",
            Error::EmptyValidSet => "empty_valid_set",
            Error::TooFewSamples { .. } => "too_few_samples",
            Error::IntegrationDiverged { .. } => "integration_diverged",
            Error::ClosedLoopDiverged { .. } => "closed_loop_diverged",
            Error::ObserverDiverged { .. } => "observer_diverged",
            Error::Singular(_) => "singular",
            Error::UnstablePole(_) => "unstable_pole",
            Error::Empty(_) => "empty_input",
            Error::Io { .. } => "io",
            Error::Format { .. } => "malformed_input",
            Error::Json(_) => "json",
        }
    }
}
