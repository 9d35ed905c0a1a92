use std::path::PathBuf;

use thiserror::Error;

use crate::backbone::BackboneSpec;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid backbone spec: {0}")]
    InvalidSpec(String),
    #[error(
        "pretrained weights unavailable: expected {} (set {} to the directory holding them; nothing is downloaded)",
        path.display(),
        crate::backbone::MODEL_CACHE_ENV
    )]
    WeightsUnavailable { path: PathBuf },
    #[error("input{} has shape {actual:?}, expected {expected:?}", index.map(|i| format!(" {i}")).unwrap_or_default())]
    Shape {
        index: Option<usize>,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("inference requires eval mode")]
    NotInEvalMode,
    #[error("model {model_id} produced non-finite logits")]
    NonFiniteLogits { model_id: String },
    #[error("checkpoint not found: {}", .0.display())]
    CheckpointNotFound(PathBuf),
    #[error("corrupt checkpoint {}: {reason}", path.display())]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("checkpoint holds {found:?}, requested {expected:?}")]
    SpecMismatch {
        expected: BackboneSpec,
        found: BackboneSpec,
    },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}
