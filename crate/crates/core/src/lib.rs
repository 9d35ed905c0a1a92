//! Core of the ultrasound hybrid-ensemble pipeline: corpus ingestion and integrity
//! checks, a synthetic corpus generator, preprocessing, weighted logit fusion with
//! simplex weight search, and binary classification metrics.
//!
//! The numeric modules are generic over the scalar type. The aliases below fix the
//! precisions used by the rest of the workspace: `f32` for model inputs, `f64` for
//! fusion and reporting.

pub mod fusion;
pub mod ingest;
pub mod kind;
pub mod label;
pub mod metrics;
pub mod preprocess;
pub mod report;
pub mod synth;

pub use kind::BackboneKind;
pub use label::{ClassLabel, Split};

/// Scalar type of model inputs and raw logits.
pub type ModelScalar = f32;
/// Scalar type of fusion, weight search and metrics.
pub type Real = f64;

pub type PreprocessConfig = preprocess::PreprocessConfig<ModelScalar>;
pub type PreprocessedImage = preprocess::PreprocessedImage<ModelScalar>;
pub type LogitMatrix = fusion::LogitMatrix<ModelScalar>;
pub type LogitDump = fusion::LogitDump<Real>;
pub type EnsembleSpec = fusion::EnsembleSpec<Real>;
pub type SimplexWeights = fusion::SimplexWeights<Real>;
pub type FusedPrediction = fusion::FusedPrediction<Real>;
pub type WeightSearch = fusion::WeightSearch<Real>;
pub type MetricsReport = metrics::MetricsReport<Real>;
