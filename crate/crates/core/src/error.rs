use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("uninitialized statistics: batch norm used in inference mode before any training update")]
    UninitializedStatistics,

    #[error("label {label} of sample {index} is outside 0..{num_classes}")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("backward already ran on this tape")]
    TapeConsumed,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("size mismatch for {path}: header implies {expected} bytes, file holds {actual} bytes")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("unsupported {what}: {value}")]
    Unsupported { what: &'static str, value: String },

    #[error("malformed header {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("band range {first}..={last} is outside 1..={bands}")]
    BandRange {
        first: usize,
        last: usize,
        bands: usize,
    },

    #[error("class {class} has {count} labeled pixels, need at least {required}")]
    ClassTooSmall {
        class: usize,
        count: usize,
        required: usize,
    },

    #[error("epoch {epoch} is outside the schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty test set")]
    EmptyTestSet,

    #[error("aggregation error: {0}")]
    Aggregate(String),

    #[error("no palette entry for class {0}")]
    MissingPalette(usize),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
