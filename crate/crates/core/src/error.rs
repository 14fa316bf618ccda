use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("timestep {t} out of range {lo}..={hi}")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("segments are not adjacent: outer starts at {outer_start}, inner ends at {inner_end}")]
    NonAdjacent { outer_start: usize, inner_end: usize },

    #[error("invalid boundary schedule: {0}")]
    InvalidBoundaries(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss at iteration {iteration} (parameter norm {param_norm:.6e})")]
    NonFiniteLoss { iteration: usize, param_norm: f64 },

    #[error("format error in {path:?}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
