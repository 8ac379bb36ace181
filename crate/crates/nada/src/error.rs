use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("prompt {0:?} is not registered with this backend")]
    UnknownPrompt(String),

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("image contains non-finite pixel values")]
    NonFinitePixels,

    #[error("degenerate direction: source and target embeddings coincide")]
    DegenerateDirection,

    #[error("degenerate image embedding (zero projection)")]
    DegenerateEmbedding,

    #[error("source and target prompts must differ")]
    IdenticalPrompts,

    #[error("truncation psi {0} outside [0, 1]")]
    InvalidPsi(f64),

    #[error("layer index {index} out of range for {layers} layers")]
    LayerOutOfRange { index: usize, layers: usize },

    #[error("k = {k} exceeds the {available} selectable layers")]
    KTooLarge { k: usize, available: usize },

    #[error("generator architectures do not match: {0}")]
    ArchitectureMismatch(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("batch sizes do not match: {a} vs {b}")]
    BatchMismatch { a: usize, b: usize },

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at iteration {iteration}{}", last_snapshot.as_ref().map(|p| format!("; last good snapshot: {}", p.display())).unwrap_or_default())]
    NonFiniteLoss {
        iteration: usize,
        last_snapshot: Option<PathBuf>,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config digest mismatch: checkpoint has {found}, expected {expected}")]
    ConfigHashMismatch { found: String, expected: String },

    #[error("discriminator resolution {disc} does not match generator output {gen}")]
    ResolutionMismatch { disc: usize, gen: usize },

    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },

    #[error("cluster count k must be at least 1")]
    InvalidK,

    #[error("degenerate source batch: all source embeddings coincide")]
    DegenerateSourceBatch,

    #[error("unknown backend identifier {0:?}")]
    UnknownBackend(String),

    #[error("unknown preset {0:?}")]
    UnknownPreset(String),

    #[error("encoder cache directory not set (set NADA_CACHE_DIR)")]
    CacheDirUnset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, got: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: format!("{got:?}"),
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
