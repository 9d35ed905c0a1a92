use std::path::PathBuf;

use ovafuse_core::fusion::FusionError;
use ovafuse_core::ingest::IngestError;
use ovafuse_core::report::ReportError;
use ovafuse_core::synth::SynthError;
use ovafuse_models::inference::InferenceError;
use ovafuse_models::{ModelError, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable prefix for scripts: `error[CODE]: message`.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config(_) => "E_CONFIG",
            CliError::Io { .. } => "E_IO",
            CliError::Ingest(_) => "E_INGEST",
            CliError::Synth(_) => "E_SYNTH",
            CliError::Model(ModelError::WeightsUnavailable { .. }) => "E_WEIGHTS",
            CliError::Model(_) => "E_MODEL",
            CliError::Train(_) => "E_TRAIN",
            CliError::Inference(_) => "E_INFERENCE",
            CliError::Fusion(_) => "E_FUSION",
            CliError::Report(_) => "E_REPORT",
        }
    }

    /// The message with its source chain, on one line.
    pub fn one_line(&self) -> String {
        let mut text = self.to_string();
        let mut source = std::error::Error::source(self);
        while let Some(s) = source {
            let part = s.to_string();
            if !text.contains(&part) {
                text.push_str(": ");
                text.push_str(&part);
            }
            source = s.source();
        }
        text.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}
