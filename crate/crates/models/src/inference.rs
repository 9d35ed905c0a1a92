//! Batched inference for single models and ensembles.

use std::collections::BTreeMap;

use rayon::prelude::*;

use ovafuse_core::fusion::{predict_from_logits, FusionError, LogitRow};
use ovafuse_core::ingest::{DatasetManifest, ImageRecord};
use ovafuse_core::metrics::{compute_metrics, confusion};
use ovafuse_core::{ClassLabel, EnsembleSpec, FusedPrediction, LogitDump, LogitMatrix, MetricsReport, PreprocessedImage, Split};

use crate::backbone::{logits_to_matrix, ModelHandle};
use crate::data::{DataError, ImageSet};
use crate::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("no records to evaluate")]
    Empty,
}

/// Eval-mode logits of `model` on every image of `data`, labelled and keyed by record id.
pub fn logits_on(model: &ModelHandle, data: &ImageSet) -> Result<LogitDump, InferenceError> {
    let matrix = logits_to_matrix(model.id(), &model.logits_tensor(&data.images)?)?;
    Ok(dump_from(&matrix, data))
}

fn dump_from(matrix: &LogitMatrix, data: &ImageSet) -> LogitDump {
    let rows = matrix
        .values
        .iter()
        .zip(&data.ids)
        .zip(&data.labels)
        .map(|((v, id), &label)| LogitRow {
            record_id: id.clone(),
            label,
            logits: [v[0] as f64, v[1] as f64],
        })
        .collect();
    LogitDump {
        model_id: matrix.model_id.clone(),
        rows,
    }
}

/// Logits of every model on `data`, computed in parallel, in input order.
pub fn logits_all(models: &[&ModelHandle], data: &ImageSet) -> Result<Vec<LogitDump>, InferenceError> {
    models.par_iter().map(|m| logits_on(m, data)).collect()
}

/// Fused predictions for a batch of images: each member runs independently and
/// the logits are combined as `spec` prescribes.
pub fn predict_ensemble(
    spec: &EnsembleSpec,
    models: &[&ModelHandle],
    batch: &[PreprocessedImage],
) -> Result<Vec<FusedPrediction>, InferenceError> {
    let matrices = models
        .par_iter()
        .map(|m| m.forward_logits(batch))
        .collect::<Result<Vec<_>, _>>()?;
    let matrices: Vec<_> = matrices.iter().map(|m| m.cast::<f64>()).collect();
    Ok(predict_from_logits(spec, &matrices)?)
}

/// Metrics of one logit dump against its own labels (argmax decision).
pub fn metrics_from_dump(dump: &LogitDump) -> Result<MetricsReport, InferenceError> {
    if dump.rows.is_empty() {
        return Err(InferenceError::Empty);
    }
    let preds = dump.matrix().argmax_labels();
    let cm = confusion(&preds, &dump.labels()).expect("same length");
    Ok(compute_metrics(&cm, &dump.model_id))
}

/// Metrics of the fused ensemble over dumps that share record order.
pub fn ensemble_metrics_from_dumps(
    spec: &EnsembleSpec,
    dumps: &[LogitDump],
    model_id: &str,
) -> Result<MetricsReport, InferenceError> {
    let first = dumps.first().ok_or(InferenceError::Empty)?;
    if first.rows.is_empty() {
        return Err(InferenceError::Empty);
    }
    for d in dumps {
        let same = d.rows.len() == first.rows.len()
            && d.rows.iter().zip(&first.rows).all(|(a, b)| a.record_id == b.record_id && a.label == b.label);
        if !same {
            return Err(FusionError::LabelMismatch(format!(
                "dump `{}` does not cover the same records as `{}`",
                d.model_id, first.model_id
            ))
            .into());
        }
    }
    let matrices: Vec<_> = dumps.iter().map(LogitDump::matrix).collect();
    let preds: Vec<ClassLabel> = predict_from_logits(spec, &matrices)?.into_iter().map(|p| p.label).collect();
    let cm = confusion(&preds, &first.labels()).expect("same length");
    Ok(compute_metrics(&cm, model_id))
}

/// Valid records of a split, in manifest order.
pub fn split_records(manifest: &DatasetManifest, split: Split) -> Vec<ImageRecord> {
    manifest.valid_records(split).cloned().collect()
}

/// Per-member metrics followed by the ensemble's, all on the same data.
pub fn evaluate_ensemble(
    spec: &EnsembleSpec,
    models: &[&ModelHandle],
    data: &ImageSet,
    ensemble_id: &str,
) -> Result<Vec<MetricsReport>, InferenceError> {
    let dumps = logits_all(models, data)?;
    let by_id: BTreeMap<&str, &LogitDump> = dumps.iter().map(|d| (d.model_id.as_str(), d)).collect();
    let mut reports = Vec::new();
    let mut ordered = Vec::new();
    for member in &spec.members {
        let dump = by_id
            .get(member.as_str())
            .ok_or_else(|| FusionError::MemberMissing(member.clone()))?;
        reports.push(metrics_from_dump(dump)?);
        ordered.push((*dump).clone());
    }
    reports.push(ensemble_metrics_from_dumps(spec, &ordered, ensemble_id)?);
    Ok(reports)
}
