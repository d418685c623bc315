use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid signal: {0}")]
    InvalidSignal(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("class {class} has {count} samples, fewer than the {parts} split parts")]
    ClassTooSmall {
        class: usize,
        count: usize,
        parts: usize,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("layout mismatch: model expects {expected}, got {found}")]
    LayoutMismatch { expected: String, found: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("kernel {kernel} larger than padded input {padded}")]
    KernelTooLarge { kernel: usize, padded: usize },

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("class index {class} out of range for {class_count} classes")]
    ClassOutOfRange { class: usize, class_count: usize },

    #[error(
        "saliency dimensions differ: guided backprop {guided:?} vs grad-cam {gradcam:?}; \
         the element-wise product needs matching dimensions (only image inputs give them), \
         request interpolation explicitly for other layouts"
    )]
    DimensionMismatch {
        guided: Vec<usize>,
        gradcam: Vec<usize>,
    },

    #[error("interpolation cannot shrink a map from {from} to {to} samples")]
    Downsample { from: usize, to: usize },

    #[error("too few samples: {0}")]
    TooFewSamples(String),

    #[error("invalid clustering input: {0}")]
    InvalidClustering(String),

    #[error("sample {sample} is not correctly classified (label {label}, predicted {predicted})")]
    Misclassified {
        sample: usize,
        label: usize,
        predicted: usize,
    },

    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error("overlapping groups: class {0} appears in more than one group")]
    OverlappingGroups(usize),

    #[error("unknown scheme {0}")]
    UnknownScheme(String),

    #[error("scheme mismatch: {0}")]
    SchemeMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Whether the error stems from invalid user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io(_) | Error::Diverged { .. } | Error::Corrupt { .. } | Error::StaleCache(_)
        )
    }
}
