//! Exhaustive search for fusion weights on a regular simplex lattice.

use std::cmp::Ordering;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use super::{fuse, FusionError, LogitMatrix, SimplexWeights, DEFAULT_THRESHOLD};
use crate::label::ClassLabel;

/// Refuse lattices larger than this.
pub const MAX_LATTICE_POINTS: usize = 5_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    F1,
    Accuracy,
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "f1" => Ok(Objective::F1),
            "accuracy" => Ok(Objective::Accuracy),
            _ => Err(format!("unknown objective `{s}`")),
        }
    }
}

/// Exact objective value as a fraction, so ties are detected without rounding.
#[derive(Debug, Clone, Copy)]
struct Fraction {
    num: u64,
    den: u64,
}

impl Fraction {
    fn cmp(&self, other: &Fraction) -> Ordering {
        (u128::from(self.num) * u128::from(other.den)).cmp(&(u128::from(other.num) * u128::from(self.den)))
    }

    fn value<T: Float + FromPrimitive>(&self) -> T {
        if self.den == 0 {
            return T::zero();
        }
        T::from_u64(self.num).expect("representable") / T::from_u64(self.den).expect("representable")
    }
}

fn objective_fraction(objective: Objective, predictions: &[ClassLabel], labels: &[ClassLabel]) -> Fraction {
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (p, l) in predictions.iter().zip(labels) {
        match (p.is_positive(), l.is_positive()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    match objective {
        Objective::Accuracy => Fraction {
            num: tp + tn,
            den: tp + tn + fp + fn_,
        },
        Objective::F1 => {
            let den = 2 * tp + fp + fn_;
            Fraction {
                num: if den == 0 { 0 } else { 2 * tp },
                den: den.max(1),
            }
        }
    }
}

/// All ways to write `divisions` as an ordered sum of `members` nonnegative parts,
/// in lexicographic order. Part `i / divisions` is the weight of member `i`.
pub fn lattice_points(members: usize, divisions: usize) -> Vec<Vec<usize>> {
    fn rec(remaining: usize, slots: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            current.push(remaining);
            out.push(current.clone());
            current.pop();
            return;
        }
        for part in 0..=remaining {
            current.push(part);
            rec(remaining - part, slots - 1, current, out);
            current.pop();
        }
    }
    let mut out = Vec::new();
    if members > 0 {
        rec(divisions, members, &mut Vec::with_capacity(members), &mut out);
    }
    out
}

fn lattice_size(members: usize, divisions: usize) -> Option<usize> {
    // C(divisions + members - 1, members - 1)
    let k = members.checked_sub(1)?;
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (divisions + k - i) as u128 / (i + 1) as u128;
        if acc > MAX_LATTICE_POINTS as u128 {
            return None;
        }
    }
    usize::try_from(acc).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSearch<T> {
    pub weights: SimplexWeights<T>,
    /// Objective of `weights` on the search split.
    pub objective: T,
    /// Number of lattice points evaluated.
    pub evaluated: usize,
}

/// Finds the lattice weights maximizing `objective` of the fused predictions.
///
/// Predictions use the sigmoid-weighted fusion and a 0.5 threshold. Ties are broken
/// toward the point closest to uniform, then toward the lexicographically smallest
/// weight vector.
pub fn optimize_weights<T: Float + FromPrimitive>(
    member_logits: &[LogitMatrix<T>],
    labels: &[ClassLabel],
    objective: Objective,
    step: T,
) -> Result<WeightSearch<T>, FusionError> {
    let members = member_logits.len();
    if members < 2 {
        return Err(FusionError::TooFewMembers(members));
    }
    for m in member_logits {
        if m.len() != labels.len() {
            return Err(FusionError::LabelMismatch(format!(
                "member `{}` has {} rows for {} labels",
                m.model_id,
                m.len(),
                labels.len()
            )));
        }
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(FusionError::DegenerateSplit);
    }
    let step_f = step.to_f64().unwrap_or(f64::NAN);
    let divisions = (1.0 / step_f).round();
    if !(step_f > 0.0) || divisions < 1.0 || (divisions * step_f - 1.0).abs() > 1e-9 {
        return Err(FusionError::InvalidStep(step_f));
    }
    let divisions = divisions as usize;
    if lattice_size(members, divisions).is_none() {
        return Err(FusionError::InvalidStep(step_f));
    }

    let scores: Vec<Vec<T>> = member_logits.iter().map(|m| m.scores()).collect();
    let threshold = T::from_f64(DEFAULT_THRESHOLD).expect("representable");
    let denominator = T::from_usize(divisions).expect("representable");

    let mut best: Option<(Fraction, u64, Vec<usize>)> = None;
    let mut evaluated = 0;
    let mut per_image = vec![T::zero(); members];
    let mut predictions = vec![ClassLabel::NotInfected; labels.len()];
    for parts in lattice_points(members, divisions) {
        evaluated += 1;
        let weights = SimplexWeights(
            parts
                .iter()
                .map(|&p| T::from_usize(p).expect("representable") / denominator)
                .collect(),
        );
        for (i, prediction) in predictions.iter_mut().enumerate() {
            for (slot, member_scores) in per_image.iter_mut().zip(&scores) {
                *slot = member_scores[i];
            }
            let p = fuse(&per_image, &weights)?;
            *prediction = if p > threshold {
                ClassLabel::Infected
            } else {
                ClassLabel::NotInfected
            };
        }
        let value = objective_fraction(objective, &predictions, labels);
        // Squared distance to uniform, scaled by members^2 to stay integral.
        let spread: u64 = parts
            .iter()
            .map(|&p| {
                let d = (members * p) as i64 - divisions as i64;
                (d * d) as u64
            })
            .sum();
        let better = match &best {
            None => true,
            Some((bv, bs, bp)) => match value.cmp(bv) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => spread < *bs || (spread == *bs && parts < *bp),
            },
        };
        if better {
            best = Some((value, spread, parts));
        }
    }
    let (value, _, parts) = best.expect("lattice is nonempty");
    Ok(WeightSearch {
        weights: SimplexWeights(
            parts
                .iter()
                .map(|&p| T::from_usize(p).expect("representable") / denominator)
                .collect(),
        ),
        objective: value.value(),
        evaluated,
    })
}
