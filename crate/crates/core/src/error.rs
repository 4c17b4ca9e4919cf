use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed line {line} in {path}: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("point cloud has no points")]
    EmptyCloud,
    #[error("non-finite coordinate in point {0}")]
    NonFinitePoint(usize),
    #[error("duplicate object id {0:?}")]
    DuplicateId(String),
    #[error("index {value} outside {lo}..={hi}")]
    OutOfRange { value: usize, lo: usize, hi: usize },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("every attention key is masked")]
    AllKeysMasked,
    #[error("zero vector: {0}")]
    ZeroVector(String),
    #[error("no valid block in object")]
    AllBlocksInvalid,
    #[error("class {class:?} is missing local label k={k}")]
    MissingLocalK { class: String, k: usize },
    #[error("embedding dimension {found} does not match {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty text")]
    EmptyText,
    #[error("empty class vocabulary")]
    EmptyVocabulary,
    #[error("no embeddings for class {0:?}")]
    MissingEmbeddings(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn file(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Error::File {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss(_))
    }
}

pub(crate) fn read_text(path: impl AsRef<std::path::Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(Error::file(path))
}

pub(crate) fn write_file(path: impl AsRef<std::path::Path>, data: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, data).map_err(Error::file(path))
}

pub(crate) fn create_file(path: impl AsRef<std::path::Path>) -> Result<std::io::BufWriter<std::fs::File>> {
    let path = path.as_ref();
    Ok(std::io::BufWriter::new(std::fs::File::create(path).map_err(Error::file(path))?))
}
