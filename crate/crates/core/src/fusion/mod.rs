//! Weighted logit fusion of binary classifiers.
//!
//! Each member contributes its logit margin `z_infected - z_notinfected`; the ensemble
//! probability of the positive class is `sigmoid(sum_i w_i * margin_i)` with weights on
//! the probability simplex. A second mode averages the raw 2-logit vectors with the same
//! weights and reads the positive-class softmax probability.

mod logits;
mod search;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kind::BackboneKind;
use crate::label::ClassLabel;

pub use logits::{LogitDump, LogitMatrix, LogitRow, LOGIT_CSV_HEADER};
pub use search::{lattice_points, optimize_weights, Objective, WeightSearch, MAX_LATTICE_POINTS};

/// Tolerance on `sum(w) == 1`.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("weight {index} is negative ({value})")]
    NegativeWeight { index: usize, value: f64 },
    #[error("weight {index} is not finite")]
    NonFiniteWeight { index: usize },
    #[error("all weights are zero")]
    AllZeroWeights,
    #[error("weights sum to {0}, not 1")]
    NotOnSimplex(f64),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("ensemble member `{0}` has no model or logits")]
    MemberMissing(String),
    #[error("labels do not match logits: {0}")]
    LabelMismatch(String),
    #[error("optimization split contains a single class")]
    DegenerateSplit,
    #[error("weight search needs at least 2 members, got {0}")]
    TooFewMembers(usize),
    #[error("invalid lattice step {0}: 1/step must be a positive integer")]
    InvalidStep(f64),
    #[error("threshold {0} is outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("logit dump: {0}")]
    Dump(String),
    #[error("ensemble spec json: {0}")]
    Json(#[from] serde_json::Error),
}

fn to_f64<T: Float>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimplexWeights<T>(Vec<T>);

impl<T: Float + FromPrimitive> SimplexWeights<T> {
    pub fn uniform(len: usize) -> Self {
        let w = T::one() / T::from_usize(len).expect("representable");
        SimplexWeights(vec![w; len])
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut w = vec![T::zero(); len];
        w[index] = T::one();
        SimplexWeights(w)
    }

    /// Accepts a vector that is already on the simplex (within [`SIMPLEX_TOLERANCE`]).
    pub fn try_new(weights: Vec<T>) -> Result<Self, FusionError> {
        check_entries(&weights)?;
        let sum = weights.iter().fold(T::zero(), |a, &b| a + b);
        if (to_f64(sum) - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(FusionError::NotOnSimplex(to_f64(sum)));
        }
        Ok(SimplexWeights(weights))
    }
}

impl<T> SimplexWeights<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

fn check_entries<T: Float>(raw: &[T]) -> Result<(), FusionError> {
    for (index, &w) in raw.iter().enumerate() {
        if !w.is_finite() {
            return Err(FusionError::NonFiniteWeight { index });
        }
        if w < T::zero() {
            return Err(FusionError::NegativeWeight {
                index,
                value: to_f64(w),
            });
        }
    }
    Ok(())
}

/// `raw_i / sum(raw)`.
pub fn normalize_weights<T: Float>(raw: &[T]) -> Result<SimplexWeights<T>, FusionError> {
    check_entries(raw)?;
    let sum = raw.iter().fold(T::zero(), |a, &b| a + b);
    if sum <= T::zero() {
        return Err(FusionError::AllZeroWeights);
    }
    Ok(SimplexWeights(raw.iter().map(|&w| w / sum).collect()))
}

/// Scalar score of one member: `logit_infected - logit_notinfected`.
///
/// For a two-class head, `sigmoid(score)` equals the softmax probability of `infected`.
pub fn model_score<T: Float>(logits: [T; 2]) -> T {
    logits[ClassLabel::Infected.index()] - logits[ClassLabel::NotInfected.index()]
}

/// Logistic function, evaluated without overflow for large `|z|`.
pub fn sigmoid<T: Float>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `sigmoid(sum_i w_i * s_i)`.
pub fn fuse<T: Float>(scores: &[T], weights: &SimplexWeights<T>) -> Result<T, FusionError> {
    if scores.len() != weights.len() {
        return Err(FusionError::LengthMismatch {
            expected: weights.len(),
            actual: scores.len(),
        });
    }
    let z = scores
        .iter()
        .zip(weights.as_slice())
        .fold(T::zero(), |acc, (&s, &w)| acc + w * s);
    Ok(sigmoid(z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Weighted sum of logit margins followed by a sigmoid.
    #[default]
    SigmoidWeighted,
    /// Weighted element-wise mean of the 2-logit vectors, softmax for the probability.
    LogitMean,
}

impl std::str::FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "sigmoid_weighted" => Ok(FusionMode::SigmoidWeighted),
            "logit_mean" => Ok(FusionMode::LogitMean),
            _ => Err(format!("unknown fusion mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec<T> {
    pub members: Vec<String>,
    pub weights: Vec<T>,
    pub mode: FusionMode,
    pub threshold: T,
}

impl<T: Float + FromPrimitive> EnsembleSpec<T> {
    /// Uniform-weight ensemble over `members` in sigmoid-weighted mode.
    pub fn uniform(members: Vec<String>) -> Self {
        let weights = SimplexWeights::uniform(members.len()).into_inner();
        EnsembleSpec {
            members,
            weights,
            mode: FusionMode::SigmoidWeighted,
            threshold: T::from_f64(DEFAULT_THRESHOLD).expect("representable"),
        }
    }

    /// DenseNet + Swin + ConvNeXt, uniform weights.
    pub fn denconst() -> Self {
        Self::uniform(
            [
                BackboneKind::DenseConnectedCnn,
                BackboneKind::WindowedAttentionTransformer,
                BackboneKind::ModernizedDepthwiseCnn,
            ]
            .iter()
            .map(|k| k.as_str().to_string())
            .collect(),
        )
    }

    /// All five families, uniform weights.
    pub fn denconrest() -> Self {
        Self::uniform(BackboneKind::ALL.iter().map(|k| k.as_str().to_string()).collect())
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "denconst" => Some(Self::denconst()),
            "denconrest" => Some(Self::denconrest()),
            _ => None,
        }
    }

    pub fn with_weights(mut self, weights: SimplexWeights<T>) -> Result<Self, FusionError> {
        if weights.len() != self.members.len() {
            return Err(FusionError::LengthMismatch {
                expected: self.members.len(),
                actual: weights.len(),
            });
        }
        self.weights = weights.into_inner();
        Ok(self)
    }

    pub fn simplex_weights(&self) -> Result<SimplexWeights<T>, FusionError> {
        SimplexWeights::try_new(self.weights.clone())
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.weights.len() != self.members.len() {
            return Err(FusionError::LengthMismatch {
                expected: self.members.len(),
                actual: self.weights.len(),
            });
        }
        self.simplex_weights()?;
        if !(self.threshold > T::zero() && self.threshold < T::one()) {
            return Err(FusionError::InvalidThreshold(to_f64(self.threshold)));
        }
        Ok(())
    }
}

impl<T> EnsembleSpec<T>
where
    T: Float + FromPrimitive + Serialize + for<'de> Deserialize<'de>,
{
    pub fn to_json(&self) -> Result<String, FusionError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self, FusionError> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedPrediction<T> {
    pub probability_infected: T,
    pub label: ClassLabel,
}

impl<T: Float> FusedPrediction<T> {
    pub fn from_probability(probability_infected: T, threshold: T) -> Self {
        let label = if probability_infected > threshold {
            ClassLabel::Infected
        } else {
            ClassLabel::NotInfected
        };
        FusedPrediction {
            probability_infected,
            label,
        }
    }
}

/// Fuses one image's member logits under `mode`.
pub fn fuse_logits<T: Float>(
    logits: &[[T; 2]],
    weights: &SimplexWeights<T>,
    mode: FusionMode,
    threshold: T,
) -> Result<FusedPrediction<T>, FusionError> {
    let probability = match mode {
        FusionMode::SigmoidWeighted => {
            let scores: Vec<T> = logits.iter().map(|&z| model_score(z)).collect();
            fuse(&scores, weights)?
        }
        FusionMode::LogitMean => {
            if logits.len() != weights.len() {
                return Err(FusionError::LengthMismatch {
                    expected: weights.len(),
                    actual: logits.len(),
                });
            }
            let mut mean = [T::zero(); 2];
            for (z, &w) in logits.iter().zip(weights.as_slice()) {
                mean[0] = mean[0] + w * z[0];
                mean[1] = mean[1] + w * z[1];
            }
            // softmax([a, b])[1] == sigmoid(b - a)
            sigmoid(mean[1] - mean[0])
        }
    };
    Ok(FusedPrediction::from_probability(probability, threshold))
}

/// Applies `spec` to precomputed member logits, matched to members by `model_id`.
pub fn predict_from_logits<T: Float + FromPrimitive>(
    spec: &EnsembleSpec<T>,
    member_logits: &[LogitMatrix<T>],
) -> Result<Vec<FusedPrediction<T>>, FusionError> {
    spec.validate()?;
    let weights = spec.simplex_weights()?;
    let ordered: Vec<&LogitMatrix<T>> = spec
        .members
        .iter()
        .map(|id| {
            member_logits
                .iter()
                .find(|m| &m.model_id == id)
                .ok_or_else(|| FusionError::MemberMissing(id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let rows = ordered.first().map(|m| m.len()).unwrap_or(0);
    for m in &ordered {
        if m.len() != rows {
            return Err(FusionError::LengthMismatch {
                expected: rows,
                actual: m.len(),
            });
        }
    }
    (0..rows)
        .map(|i| {
            let logits: Vec<[T; 2]> = ordered.iter().map(|m| m.values[i]).collect();
            fuse_logits(&logits, &weights, spec.mode, spec.threshold)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let w = normalize_weights(&[1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(w.as_slice().iter().all(|&x| (x - 0.2f64).abs() < 1e-15));
        let w = normalize_weights(&[2.0, 3.0, 5.0]).unwrap();
        assert_eq!(w.as_slice(), &[0.2, 0.3, 0.5]);
        assert!(matches!(normalize_weights(&[0.0f64, 0.0, 0.0]), Err(FusionError::AllZeroWeights)));
        assert!(matches!(normalize_weights::<f64>(&[]), Err(FusionError::AllZeroWeights)));
        assert!(matches!(
            normalize_weights(&[1.0, -0.5]),
            Err(FusionError::NegativeWeight { index: 1, .. })
        ));
        assert!(matches!(
            normalize_weights(&[f64::NAN]),
            Err(FusionError::NonFiniteWeight { index: 0 })
        ));
    }

    #[test]
    fn score_examples() {
        assert_eq!(model_score([0.0, 0.0]), 0.0);
        assert_eq!(model_score([-1.0, 3.0]), 4.0);
        assert_eq!(model_score([3.0, -1.0]), -4.0);
    }

    #[test]
    fn fuse_examples() {
        let w = SimplexWeights::<f64>::uniform(5);
        assert_eq!(fuse(&[0.0; 5], &w).unwrap(), 0.5);
        assert!((fuse(&[1.0; 5], &w).unwrap() - 0.7310585786300049).abs() < 1e-12);
        let hot = SimplexWeights::<f64>::one_hot(3, 1);
        assert_eq!(fuse(&[5.0, -2.5, 9.0], &hot).unwrap(), sigmoid(-2.5));
        assert!(matches!(fuse(&[1.0, 2.0], &w), Err(FusionError::LengthMismatch { .. })));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!(sigmoid(-30.0f32) > 0.0);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }

    #[test]
    fn presets() {
        let st = EnsembleSpec::<f64>::denconst();
        assert_eq!(st.members, ["dense_connected_cnn", "windowed_attention_transformer", "modernized_depthwise_cnn"]);
        assert!(st.weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        let rest = EnsembleSpec::<f64>::denconrest();
        assert_eq!(rest.members.len(), 5);
        assert_eq!(rest.threshold, 0.5);
        assert!(rest.validate().is_ok());
        assert!(EnsembleSpec::<f64>::preset("DenConREST").is_some());
        assert!(EnsembleSpec::<f64>::preset("other").is_none());
    }

    #[test]
    fn spec_json_contract() {
        let spec = EnsembleSpec::<f64>::denconst();
        let value: serde_json::Value = serde_json::from_str(&spec.to_json().unwrap()).unwrap();
        assert_eq!(value["mode"], "sigmoid_weighted");
        assert_eq!(value["threshold"], 0.5);
        assert_eq!(value["members"].as_array().unwrap().len(), 3);
        let back = EnsembleSpec::<f64>::from_json(&value.to_string()).unwrap();
        assert_eq!(back, spec);

        let bad = r#"{"members":["a","b"],"weights":[0.7,0.7],"mode":"logit_mean","threshold":0.5}"#;
        assert!(matches!(EnsembleSpec::<f64>::from_json(bad), Err(FusionError::NotOnSimplex(_))));
    }

    #[test]
    fn unanimous_members_predict_infected_in_both_modes() {
        let spec = EnsembleSpec::<f64>::denconst();
        let logits: Vec<LogitMatrix<f64>> = spec
            .members
            .iter()
            .map(|id| LogitMatrix::new(id.clone(), vec![[-0.3, 1.2], [0.1, 0.4]]))
            .collect();
        for mode in [FusionMode::SigmoidWeighted, FusionMode::LogitMean] {
            let spec = EnsembleSpec { mode, ..spec.clone() };
            let preds = predict_from_logits(&spec, &logits).unwrap();
            assert!(preds.iter().all(|p| p.label == ClassLabel::Infected));
        }
    }

    #[test]
    fn vertex_weight_recovers_first_member() {
        let members = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let spec = EnsembleSpec::<f64>::uniform(members)
            .with_weights(SimplexWeights::try_new(vec![1.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let a = LogitMatrix::new("a", vec![[1.0, 0.0], [0.0, 1.0], [2.0, 3.0]]);
        let b = LogitMatrix::new("b", vec![[0.0, 9.0], [9.0, 0.0], [9.0, 0.0]]);
        let c = LogitMatrix::new("c", vec![[0.0, 9.0], [9.0, 0.0], [9.0, 0.0]]);
        let preds = predict_from_logits(&spec, &[c, b, a.clone()]).unwrap();
        let solo: Vec<ClassLabel> = a.argmax_labels();
        assert_eq!(preds.iter().map(|p| p.label).collect::<Vec<_>>(), solo);
    }

    #[test]
    fn missing_member_is_reported() {
        let spec = EnsembleSpec::<f64>::denconst();
        let only = LogitMatrix::new("dense_connected_cnn", vec![[0.0, 1.0]]);
        assert!(matches!(
            predict_from_logits(&spec, &[only]),
            Err(FusionError::MemberMissing(m)) if m == "windowed_attention_transformer"
        ));
    }
}
