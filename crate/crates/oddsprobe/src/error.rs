use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    #[error("unbound graph input '{0}'")]
    UnboundInput(String),

    #[error("unknown graph output '{0}'")]
    UnknownOutput(String),

    #[error("graph output '{0}' is not a scalar")]
    NonScalarOutput(String),

    #[error("non-finite value produced at {0}")]
    NonFinite(String),

    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),

    #[error("class {class} has only {count} usable samples (minimum {minimum})")]
    InsufficientClassSamples {
        class: usize,
        count: usize,
        minimum: usize,
    },

    #[error("statistics were fitted against a different model (expected checksum {expected}, got {actual})")]
    ModelMismatch { expected: String, actual: String },

    #[error("thresholds have not been calibrated")]
    Uncalibrated,

    #[error("DeepFool did not converge after {iterations} iterations (partial distance {partial_distance})")]
    DeepFoolNoConvergence {
        iterations: usize,
        partial_distance: f64,
    },

    #[error("no logit crossover on the segment: {0}")]
    NoCrossover(String),

    #[error("zero distance to corpus point {index}: nearest-neighbor ratio undefined")]
    ZeroNnDistance { index: usize },

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("checksum mismatch for {what}: expected {expected}, got {actual}")]
    ChecksumMismatch {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("unsupported artifact version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn in_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
