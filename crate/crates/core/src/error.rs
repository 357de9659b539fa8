use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid hyperparameters, dataset parameters or encoder spec.
    #[error("configuration error: {0}")]
    Config(String),

    /// Incompatible data (channel counts, sizes, labels).
    #[error("data error: {0}")]
    Data(String),

    /// A binary file did not match its expected layout.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// A caller violated an operation's preconditions.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The loss or parameters became non-finite during training.
    #[error("training failed at batch {batch}: {message}")]
    Training { batch: usize, message: String },

    /// A batch plan could not be formed.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// The linear probe could not be evaluated.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// K^N * b exceeds M.
    #[error("capacity constraint violated: K^N = {clusters_total} exceeds M/b = {samples_per_batch:.2}")]
    Capacity {
        clusters_total: u128,
        samples_per_batch: f64,
    },

    /// A required artifact is missing from an experiment directory.
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
