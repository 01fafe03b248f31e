//! Per-class feature prototypes: frozen source means, or running means of
//! pseudo-labeled target features accumulated over the whole stream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ComposedModel;
use crate::numerics::Tensor;
use crate::pseudo::PseudoLabel;
use crate::stream::{Label, SourceDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrototypeMode {
    /// Class means of source features, fixed after pre-training.
    Source,
    /// Running means of target features, built from pseudo-labels only.
    Running,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    mode: PrototypeMode,
    feature_dim: usize,
    sums: Vec<Vec<f64>>,
    counts: Vec<u64>,
}

impl PrototypeBank {
    /// An empty running bank.
    pub fn running(num_classes: usize, feature_dim: usize) -> Self {
        PrototypeBank {
            mode: PrototypeMode::Running,
            feature_dim,
            sums: vec![vec![0.0; feature_dim]; num_classes],
            counts: vec![0; num_classes],
        }
    }

    /// Rebuilds a bank from stored sums and counts.
    pub fn from_parts(mode: PrototypeMode, sums: Vec<Vec<f64>>, counts: Vec<u64>) -> Result<Self> {
        let feature_dim = sums.first().map_or(0, Vec::len);
        if sums.len() != counts.len() || sums.iter().any(|s| s.len() != feature_dim) {
            return Err(Error::Data(
                "prototype sums and counts disagree in shape".into(),
            ));
        }
        if mode == PrototypeMode::Source && counts.contains(&0) {
            return Err(Error::Data(
                "source prototypes need every class populated".into(),
            ));
        }
        Ok(PrototypeBank {
            mode,
            feature_dim,
            sums,
            counts,
        })
    }

    /// Source prototypes: the mean source feature of every class.
    pub fn from_source(model: &ComposedModel, source: &SourceDataset) -> Result<Self> {
        let num_classes = model.config().num_known_classes;
        let feature_dim = model.config().feature_dim;
        let features = model.forward_features(&source.inputs()?)?;
        let mut sums = vec![vec![0.0; feature_dim]; num_classes];
        let mut counts = vec![0u64; num_classes];
        for (row, ex) in features.rows().zip(&source.examples) {
            let c = match ex.label {
                Label::Known(c) if c < num_classes => c,
                other => return Err(Error::Data(format!("source example labeled {other}"))),
            };
            for (s, v) in sums[c].iter_mut().zip(row) {
                *s += v;
            }
            counts[c] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Data(format!("class {c} has no source samples")));
        }
        Ok(PrototypeBank {
            mode: PrototypeMode::Source,
            feature_dim,
            sums,
            counts,
        })
    }

    pub fn mode(&self) -> PrototypeMode {
        self.mode
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn sums(&self) -> &[Vec<f64>] {
        &self.sums
    }

    /// Adds every `Known(c)` feature row to class `c`; other rows are ignored.
    pub fn update_running(&mut self, features: &Tensor, labels: &[PseudoLabel]) -> Result<()> {
        if self.mode != PrototypeMode::Running {
            return Err(Error::Config("source prototypes are frozen".into()));
        }
        let (rows, cols) = features.row_view();
        if rows != labels.len() || (rows > 0 && cols != self.feature_dim) {
            return Err(Error::shape(
                "update_running_prototypes",
                &[features.shape(), &[labels.len(), self.feature_dim]],
            ));
        }
        for (row, label) in features.rows().zip(labels) {
            if let PseudoLabel::Known(c) = *label {
                if c >= self.counts.len() {
                    return Err(Error::Data(format!(
                        "pseudo-label {c} outside source classes"
                    )));
                }
                for (s, v) in self.sums[c].iter_mut().zip(row) {
                    *s += v;
                }
                self.counts[c] += 1;
            }
        }
        Ok(())
    }

    /// Prototype of class `c`, or `None` while a running bank has no
    /// contributions for it.
    pub fn get(&self, c: usize) -> Result<Option<Vec<f64>>> {
        let n = *self
            .counts
            .get(c)
            .ok_or_else(|| Error::Data(format!("class {c} outside source classes")))?;
        if n == 0 {
            return Ok(None);
        }
        Ok(Some(self.sums[c].iter().map(|s| s / n as f64).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NetworkConfig, G_L0_B, G_L0_W, G_L1_B, G_L1_W};
    use crate::stream::LabeledExample;

    fn row(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn running_mean_of_two() {
        let mut b = PrototypeBank::running(3, 2);
        b.update_running(&row(&[1.0, 0.0]), &[PseudoLabel::Known(1)])
            .unwrap();
        b.update_running(&row(&[3.0, 0.0]), &[PseudoLabel::Known(1)])
            .unwrap();
        assert_eq!(b.get(1).unwrap(), Some(vec![2.0, 0.0]));
        assert_eq!(b.counts()[1], 2);
    }

    #[test]
    fn uncertain_and_unknown_ignored() {
        let mut b = PrototypeBank::running(2, 2);
        let before = b.clone();
        let f = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        b.update_running(&f, &[PseudoLabel::Uncertain, PseudoLabel::Unknown])
            .unwrap();
        assert_eq!(b, before);
    }

    #[test]
    fn empty_running_bank_is_absent_everywhere() {
        let b = PrototypeBank::running(4, 3);
        for c in 0..4 {
            assert_eq!(b.get(c).unwrap(), None);
        }
        assert!(b.get(4).is_err());
    }

    #[test]
    fn one_contribution_is_that_feature() {
        let mut b = PrototypeBank::running(2, 3);
        b.update_running(&row(&[0.5, -1.0, 2.0]), &[PseudoLabel::Known(0)])
            .unwrap();
        assert_eq!(b.get(0).unwrap(), Some(vec![0.5, -1.0, 2.0]));
        assert_eq!(b.get(1).unwrap(), None);
    }

    #[test]
    fn mismatched_rows_rejected() {
        let mut b = PrototypeBank::running(2, 2);
        assert!(b.update_running(&row(&[1.0, 2.0]), &[]).is_err());
    }

    /// A model whose `g` is the identity on non-negative 2-D inputs.
    fn identity_backbone() -> ComposedModel {
        let cfg = NetworkConfig {
            input_dim: 2,
            hidden_dim: 2,
            feature_dim: 2,
            num_known_classes: 2,
            projection_hidden_dim: 2,
            projection_dim: 2,
        };
        let mut m = ComposedModel::zeros(cfg).unwrap();
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        m.params_mut().insert(G_L0_W, eye.clone());
        m.params_mut().insert(G_L1_W, eye);
        m.params_mut().insert(G_L0_B, Tensor::zeros(&[2]));
        m.params_mut().insert(G_L1_B, Tensor::zeros(&[2]));
        m
    }

    fn ex(x: [f64; 2], c: usize) -> LabeledExample {
        LabeledExample {
            x: Tensor::vector(x.to_vec()),
            label: Label::Known(c),
        }
    }

    #[test]
    fn source_means() {
        let m = identity_backbone();
        let ds = SourceDataset {
            examples: vec![ex([1.0, 0.0], 0), ex([3.0, 0.0], 0), ex([0.0, 5.0], 1)],
            num_known: 2,
        };
        let bank = PrototypeBank::from_source(&m, &ds).unwrap();
        assert_eq!(bank.mode(), PrototypeMode::Source);
        assert_eq!(bank.get(0).unwrap(), Some(vec![2.0, 0.0]));
        assert_eq!(bank.get(1).unwrap(), Some(vec![0.0, 5.0]));

        let mut doubled = ds.clone();
        doubled.examples.extend(ds.examples.clone());
        let bank2 = PrototypeBank::from_source(&m, &doubled).unwrap();
        for c in 0..2 {
            assert_eq!(bank.get(c).unwrap(), bank2.get(c).unwrap());
        }
    }

    #[test]
    fn source_bank_is_frozen() {
        let m = identity_backbone();
        let ds = SourceDataset {
            examples: vec![ex([1.0, 0.0], 0), ex([0.0, 1.0], 1)],
            num_known: 2,
        };
        let mut bank = PrototypeBank::from_source(&m, &ds).unwrap();
        assert!(bank
            .update_running(&row(&[1.0, 1.0]), &[PseudoLabel::Known(0)])
            .is_err());
    }

    #[test]
    fn missing_source_class_is_error() {
        let m = identity_backbone();
        let ds = SourceDataset {
            examples: vec![ex([1.0, 0.0], 0)],
            num_known: 2,
        };
        assert!(PrototypeBank::from_source(&m, &ds).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn contribution_order_does_not_matter(
                rows in proptest::collection::vec((proptest::collection::vec(-5.0f64..5.0, 3), 0usize..3), 1..40),
                rotate in 0usize..40,
            ) {
                let mut a = PrototypeBank::running(3, 3);
                let mut b = PrototypeBank::running(3, 3);
                let mut shuffled = rows.clone();
                shuffled.rotate_left(rotate % rows.len());
                shuffled.reverse();
                for (v, c) in &rows {
                    a.update_running(&row(v), &[PseudoLabel::Known(*c)]).unwrap();
                }
                for (v, c) in &shuffled {
                    b.update_running(&row(v), &[PseudoLabel::Known(*c)]).unwrap();
                }
                for c in 0..3 {
                    prop_assert_eq!(a.counts()[c], b.counts()[c]);
                    match (a.get(c).unwrap(), b.get(c).unwrap()) {
                        (Some(x), Some(y)) => {
                            for (p, q) in x.iter().zip(&y) {
                                prop_assert!((p - q).abs() < 1e-9);
                            }
                        }
                        (None, None) => {}
                        _ => prop_assert!(false),
                    }
                }
            }
        }
    }
}
