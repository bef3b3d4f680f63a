use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the grading pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene spec: {0}")]
    InvalidSceneSpec(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("raster dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("tensor shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("class weights undefined: {0}")]
    ClassWeights(String),

    #[error("non-finite gradient in layer `{layer}`")]
    NonFiniteGradient { layer: String },

    #[error("class {class} has no samples in the training split")]
    EmptyClass { class: usize },

    #[error("sub-model parameters changed during fusion training (hash {before} -> {after})")]
    FrozenParametersChanged { before: String, after: String },

    #[error("examinee {examinee} appears in both `{first}` and `{second}` splits")]
    Contamination {
        examinee: u64,
        first: String,
        second: String,
    },

    #[error("cannot split {examinees} examinees into {splits} subsets")]
    TooFewExaminees { examinees: usize, splits: usize },

    #[error("empty confusion matrix")]
    EmptyConfusionMatrix,

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("artifact provenance mismatch: {0}")]
    Provenance(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Creates `path` for writing, making its parent directory first.
pub(crate) fn create_file(path: &std::path::Path) -> Result<std::fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}
