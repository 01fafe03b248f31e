//! Normalized entropy and dual-threshold pseudo-labeling from teacher outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tensor, LOG_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PseudoLabel {
    Known(usize),
    Unknown,
    /// Neither confident enough to be known nor uncertain enough to be
    /// unknown; excluded from adaptation.
    Uncertain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoThresholds {
    delta_l: f64,
    delta_u: f64,
}

impl PseudoThresholds {
    pub fn new(delta_l: f64, delta_u: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&delta_l) || !(0.0..=1.0).contains(&delta_u) {
            return Err(Error::Config(format!(
                "pseudo-label thresholds must lie in [0,1], got {delta_l}, {delta_u}"
            )));
        }
        if delta_l >= delta_u {
            return Err(Error::Config(format!(
                "delta_l must be below delta_u, got {delta_l} >= {delta_u}"
            )));
        }
        Ok(PseudoThresholds { delta_l, delta_u })
    }

    pub fn delta_l(&self) -> f64 {
        self.delta_l
    }

    pub fn delta_u(&self) -> f64 {
        self.delta_u
    }
}

/// Shannon entropy divided by `ln K`, in `[0, 1]`.
///
/// Evaluated as `1 − Σ p·ln(K·p) / ln K`, which is algebraically the same and
/// makes the uniform and one-hot cases come out exactly 1 and 0.
pub fn normalized_entropy(p: &[f64]) -> Result<f64> {
    let k = p.len();
    if k < 2 {
        return Err(Error::Degenerate {
            op: "normalized_entropy",
            detail: format!("needs at least 2 classes, got {k}"),
        });
    }
    let kf = k as f64;
    let divergence: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * (v.max(LOG_FLOOR) * kf).ln())
        .sum();
    Ok((1.0 - divergence / kf.ln()).clamp(0.0, 1.0))
}

/// Lowest index among the maxima.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Tags one probability row: `I ≤ δ_l` → known argmax, `I ≥ δ_u` → unknown,
/// otherwise uncertain.
pub fn pseudo_label_row(p: &[f64], thresholds: &PseudoThresholds) -> Result<PseudoLabel> {
    let i = normalized_entropy(p)?;
    Ok(if i <= thresholds.delta_l {
        PseudoLabel::Known(argmax(p))
    } else if i >= thresholds.delta_u {
        PseudoLabel::Unknown
    } else {
        PseudoLabel::Uncertain
    })
}

pub fn assign_pseudo_labels(
    teacher_probs: &Tensor,
    thresholds: &PseudoThresholds,
) -> Result<Vec<PseudoLabel>> {
    teacher_probs
        .rows()
        .map(|row| pseudo_label_row(row, thresholds))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagCounts {
    pub known: usize,
    pub unknown: usize,
    pub uncertain: usize,
}

impl TagCounts {
    pub fn of(labels: &[PseudoLabel]) -> Self {
        let mut c = TagCounts::default();
        for l in labels {
            match l {
                PseudoLabel::Known(_) => c.known += 1,
                PseudoLabel::Unknown => c.unknown += 1,
                PseudoLabel::Uncertain => c.uncertain += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.known + self.unknown + self.uncertain
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn th() -> PseudoThresholds {
        PseudoThresholds::new(0.25, 0.75).unwrap()
    }

    #[test]
    fn uniform_is_one_and_one_hot_is_zero() {
        for k in 2..60 {
            let u = vec![1.0 / k as f64; k];
            assert_eq!(normalized_entropy(&u).unwrap(), 1.0, "k={k}");
            let mut oh = vec![0.0; k];
            oh[k / 2] = 1.0;
            assert_eq!(normalized_entropy(&oh).unwrap(), 0.0, "k={k}");
        }
    }

    #[test]
    fn binary_point_nine() {
        // −(0.9 ln 0.9 + 0.1 ln 0.1) / ln 2
        let expected = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln()) / 2f64.ln();
        let got = normalized_entropy(&[0.9, 0.1]).unwrap();
        assert!((got - expected).abs() < 1e-14);
        assert!((got - 0.4690).abs() < 5e-5);
    }

    #[test]
    fn single_class_is_error() {
        assert!(normalized_entropy(&[1.0]).is_err());
    }

    /// Two-class row whose normalized entropy is `target` (bisection on p).
    fn row_with_entropy(target: f64) -> Vec<f64> {
        let (mut lo, mut hi) = (0.5, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if normalized_entropy(&[mid, 1.0 - mid]).unwrap() > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        vec![lo, 1.0 - lo]
    }

    #[test]
    fn three_cases() {
        assert_eq!(
            pseudo_label_row(&row_with_entropy(0.2), &th()).unwrap(),
            PseudoLabel::Known(0)
        );
        assert_eq!(
            pseudo_label_row(&row_with_entropy(0.8), &th()).unwrap(),
            PseudoLabel::Unknown
        );
        assert_eq!(
            pseudo_label_row(&row_with_entropy(0.5), &th()).unwrap(),
            PseudoLabel::Uncertain
        );
    }

    #[test]
    fn boundaries_are_closed() {
        // Thresholds set to the exact entropy of a row.
        let p = [0.9, 0.1];
        let i = normalized_entropy(&p).unwrap();
        let at_lower = PseudoThresholds::new(i, 0.99).unwrap();
        assert_eq!(
            pseudo_label_row(&p, &at_lower).unwrap(),
            PseudoLabel::Known(0)
        );
        let at_upper = PseudoThresholds::new(0.01, i).unwrap();
        assert_eq!(
            pseudo_label_row(&p, &at_upper).unwrap(),
            PseudoLabel::Unknown
        );
    }

    #[test]
    fn ties_pick_lowest_index() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn thresholds_validated() {
        assert!(PseudoThresholds::new(0.8, 0.2).is_err());
        assert!(PseudoThresholds::new(0.5, 0.5).is_err());
        assert!(PseudoThresholds::new(-0.1, 0.5).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.0f64..1.0, k).prop_filter_map("nonzero", |v| {
                let s: f64 = v.iter().sum();
                (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
            })
        }

        proptest! {
            #[test]
            fn entropy_in_unit_interval(p in (2usize..10).prop_flat_map(simplex)) {
                let i = normalized_entropy(&p).unwrap();
                prop_assert!((0.0..=1.0).contains(&i));
            }

            #[test]
            fn tags_partition_batch(rows in proptest::collection::vec(simplex(4), 1..30)) {
                let t = Tensor::from_rows(&rows).unwrap();
                let labels = assign_pseudo_labels(&t, &th()).unwrap();
                prop_assert_eq!(TagCounts::of(&labels).total(), rows.len());
            }

            #[test]
            fn concentrating_never_moves_toward_unknown(p in simplex(5), w in 0.0f64..1.0) {
                // Mixing toward the one-hot of the argmax majorizes p.
                let top = argmax(&p);
                let q: Vec<f64> = p.iter().enumerate()
                    .map(|(i, &v)| (1.0 - w) * v + if i == top { w } else { 0.0 })
                    .collect();
                let rank = |l: PseudoLabel| match l {
                    PseudoLabel::Known(_) => 0,
                    PseudoLabel::Uncertain => 1,
                    PseudoLabel::Unknown => 2,
                };
                let before = rank(pseudo_label_row(&p, &th()).unwrap());
                let after = rank(pseudo_label_row(&q, &th()).unwrap());
                prop_assert!(after <= before);
            }
        }
    }
}
