//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T, E = KvwError> = std::result::Result<T, E>;

/// All failure modes of the engine, grouped so the CLI can map them onto
/// stable exit codes.
#[derive(Debug, thiserror::Error)]
pub enum KvwError {
    /// Shapes, layer ranges, capacities or hyperparameters are inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed user input (token ids, datasets, grids).
    #[error("input error: {0}")]
    Input(String),

    /// No position was selected for coefficient extraction.
    #[error("empty selection: {0}")]
    EmptySelection(String),

    /// A non-finite value appeared during computation.
    #[error("numeric error in layer {layer}: {msg}")]
    Numeric { layer: usize, msg: String },

    /// A stored artifact is truncated, mismatched, or fails its checksum.
    #[error("corrupt file: {0}")]
    CorruptFile(String),

    /// A stored artifact carries an unknown tag or format version.
    #[error("version error: {0}")]
    Version(String),

    /// Two artifacts cannot be used together (e.g. coefficient dims vs model).
    #[error("compatibility error: {0}")]
    Compatibility(String),

    /// Planted-fact construction could not meet its recall guarantee.
    #[error("construction error: {msg} (failing facts: {failing:?})")]
    Construction { msg: String, failing: Vec<usize> },

    /// Constrained selection found no admissible configuration.
    #[error("no feasible configuration: {0}")]
    NoFeasible(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl KvwError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KvwError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 configuration/input, 3 numeric,
    /// 4 no feasible configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            KvwError::Numeric { .. } => 3,
            KvwError::NoFeasible(_) => 4,
            _ => 2,
        }
    }
}
