use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range for {what} of length {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("index {index} at position {position} out of range for vocabulary of size {len}")]
    BatchIndex {
        position: usize,
        index: usize,
        len: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("inconsistent state: {0}")]
    Consistency(String),

    #[error("non-finite gradient in `{tensor}` at element {element} (value {value})")]
    NonFinite {
        tensor: &'static str,
        element: usize,
        value: f64,
    },

    #[error("cosine similarity undefined for a zero-norm vector")]
    UndefinedSimilarity,

    #[error("rank correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("evaluation failed: {usable} usable pairs ({skipped} skipped), at least 2 required")]
    Evaluation { usable: usize, skipped: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("no records in {0}")]
    NoRecords(PathBuf),

    #[error("empty vocabulary")]
    EmptyVocabulary,

    #[error("malformed model file: {0}")]
    Format(String),

    #[error("unsupported model file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch in model file")]
    Checksum,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
