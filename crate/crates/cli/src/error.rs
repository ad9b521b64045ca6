use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ctsid::Error),

    #[error("bad config {path}: {msg}")]
    Config { path: String, msg: String },

    #[error("no dataset manifest in {0}")]
    MissingManifest(String),

    #[error("model has order {0} but the controller needs order 3")]
    ModelOrder(usize),

    #[error("malformed csv {path}: {msg}")]
    Csv { path: String, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Config { .. } => "config",
            CliError::MissingManifest(_) => "missing_manifest",
            CliError::ModelOrder(_) => "model_order",
            CliError::Csv { .. } => "malformed_csv",
            CliError::Io { .. } => "io",
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// One line, `error[code]: message`.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {msg}", self.code())
    }
}
