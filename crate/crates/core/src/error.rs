use std::path::PathBuf;

use thiserror::Error;

use crate::transforms::TransformKind;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("no gradient path through non-differentiable transform `{0}`; route it through a BPDA surrogate")]
    NonDifferentiable(TransformKind),

    #[error("missing BPDA surrogate for `{0}`")]
    MissingSurrogate(TransformKind),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("undefined value: {0}")]
    Undefined(String),

    #[error("stage `{stage}` requires {missing}")]
    MissingStage { stage: String, missing: String },

    #[error("artifact {path:?}: {reason}")]
    Artifact { path: PathBuf, reason: String },

    #[error("config digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
