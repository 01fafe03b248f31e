//! Quick numerical self-checks: loss gradients against finite differences,
//! the contrastive loss against a direct triple loop, pseudo-label
//! invariants, and the teacher EMA closed form.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    adaptation_loss_on, contrastive_loss, ContrastiveLayout, LossSettings, LossWeights,
};
use crate::model::{ComposedModel, GraphModel, NetworkConfig, StudentTeacherPair};
use crate::numerics::{cosine_similarity, finite_difference_check, GradCheckOptions, Tensor};
use crate::prototypes::{PrototypeBank, PrototypeMode};
use crate::pseudo::{
    normalized_entropy, pseudo_label_row, PseudoLabel, PseudoThresholds, TagCounts,
};
use crate::stream::derive_rng;

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckOutcome {
            name: name.into(),
            passed,
            detail,
        }
    }
}

/// Which adaptation loss a gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Contrastive,
    Entropy,
    Total,
}

/// A small random model, batch, tag vector, and prototype bank.
#[derive(Debug, Clone)]
pub struct GradientProblem {
    pub model: ComposedModel,
    pub batch: Tensor,
    pub augmented: Tensor,
    pub labels: Vec<PseudoLabel>,
    pub bank: PrototypeBank,
}

impl GradientProblem {
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = derive_rng(seed, 0x5e1f);
        let k = rng.random_range(2..=4);
        let config = NetworkConfig {
            input_dim: rng.random_range(2..=4),
            hidden_dim: rng.random_range(3..=6),
            feature_dim: rng.random_range(2..=5),
            num_known_classes: k,
            projection_hidden_dim: rng.random_range(2..=5),
            projection_dim: rng.random_range(2..=4),
        };
        let model = ComposedModel::init(config, &mut rng)?;
        let n = rng.random_range(3..=7);
        let normal = |rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            Tensor::matrix(rows, cols, data)
        };
        let batch = normal(n, config.input_dim, &mut rng)?;
        let noise = normal(n, config.input_dim, &mut rng)?;
        let augmented = batch.add(&noise.scale(0.1))?;
        let mut labels: Vec<PseudoLabel> = (0..n)
            .map(|_| match rng.random_range(0..5) {
                0 => PseudoLabel::Unknown,
                1 => PseudoLabel::Uncertain,
                _ => PseudoLabel::Known(rng.random_range(0..k)),
            })
            .collect();
        // At least one known sample, so the contrastive term is never empty.
        labels[0] = PseudoLabel::Known(0);
        let sums = (0..k)
            .map(|_| {
                (0..config.feature_dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let counts = (0..k)
            .map(|c| {
                if c == k - 1 {
                    0
                } else {
                    rng.random_range(1..4)
                }
            })
            .collect();
        let bank = PrototypeBank::from_parts(PrototypeMode::Running, sums, counts)?;
        Ok(GradientProblem {
            model,
            batch,
            augmented,
            labels,
            bank,
        })
    }

    pub fn check(&self, term: LossTerm, lambda: f64) -> Result<crate::numerics::GradCheckReport> {
        let settings = LossSettings {
            tau: 0.5,
            weights: LossWeights::new(lambda)?,
            use_contrastive: term != LossTerm::Entropy,
            use_entropy: term != LossTerm::Contrastive,
        };
        let options = GradCheckOptions::default();
        finite_difference_check(
            |g, vars| {
                let gm = GraphModel::new(vars);
                let loss = adaptation_loss_on(
                    g,
                    &gm,
                    &self.batch,
                    &self.augmented,
                    &self.labels,
                    &self.bank,
                    &settings,
                )?;
                Ok(loss.total)
            },
            self.model.params(),
            &options,
        )
    }
}

fn naive_contrastive(layout: &ContrastiveLayout) -> Result<f64> {
    let nk = layout.known_labels.len();
    let n = layout.len();
    let e = |a: usize, b: usize| -> Result<f64> {
        Ok((cosine_similarity(layout.z.row(a), layout.z.row(b))? / layout.tau).exp())
    };
    let mut cross = 0.0;
    for u in nk..n {
        for j in 0..nk {
            cross += e(u, j)?;
        }
    }
    let mut total = 0.0;
    for i in 0..nk {
        let positives: Vec<usize> = (0..nk)
            .filter(|&p| p != i && layout.known_labels[p] == layout.known_labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let mut denom = cross;
        for a in (0..nk).filter(|&a| a != i) {
            denom += e(i, a)?;
        }
        let mut inner = 0.0;
        for &p in &positives {
            inner += (e(i, p)? / denom).ln();
        }
        total -= inner / positives.len() as f64;
    }
    Ok(total)
}

fn random_layout<R: Rng>(rng: &mut R) -> ContrastiveLayout {
    let tau = rng.random_range(0.05..1.0);
    let known_samples = rng.random_range(0..=4);
    let unknown_samples = rng.random_range(0..=3);
    let classes = rng.random_range(1..=3);
    let mut known_labels = Vec::new();
    for _ in 0..known_samples {
        let c = rng.random_range(0..classes);
        let copies = if rng.random_bool(0.7) { 3 } else { 2 };
        known_labels.extend(std::iter::repeat_n(c, copies));
    }
    let rows = known_labels.len() + 2 * unknown_samples;
    if rows == 0 {
        return ContrastiveLayout::empty(tau);
    }
    let dim = rng.random_range(2..=4);
    let data = (0..rows * dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    ContrastiveLayout {
        z: Tensor::matrix(rows, dim, data).expect("shape matches data"),
        known_labels,
        num_unknown: 2 * unknown_samples,
        tau,
    }
}

fn gradient_checks(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (term, name) in [
        (LossTerm::Contrastive, "gradient L_c"),
        (LossTerm::Entropy, "gradient L_e"),
        (LossTerm::Total, "gradient L_c + λL_e"),
    ] {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let problem = GradientProblem::random(seed)?;
            worst = worst.max(problem.check(term, 0.7)?.max_relative_error);
        }
        out.push(CheckOutcome::new(
            name,
            worst < GRADIENT_TOLERANCE,
            format!("{seeds} seeds, max relative error {worst:.2e}"),
        ));
    }
    Ok(out)
}

fn contrastive_oracle() -> Result<Vec<CheckOutcome>> {
    let mut rng = derive_rng(11, 0x0ac1e);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let layout = random_layout(&mut rng);
        worst = worst.max((contrastive_loss(&layout)? - naive_contrastive(&layout)?).abs());
    }
    let hand = ContrastiveLayout {
        z: Tensor::matrix(3, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0])?,
        known_labels: vec![0, 0, 0],
        num_unknown: 0,
        tau: 0.1,
    };
    let hand_err = (contrastive_loss(&hand)? - 3.0 * 2f64.ln()).abs();
    Ok(vec![
        CheckOutcome::new(
            "contrastive loss vs triple loop",
            worst < ORACLE_TOLERANCE,
            format!("100 layouts, max abs difference {worst:.2e}"),
        ),
        CheckOutcome::new(
            "contrastive loss hand case 3 ln 2",
            hand_err < 1e-9,
            format!("abs error {hand_err:.2e}"),
        ),
    ])
}

fn pseudo_label_checks() -> Result<CheckOutcome> {
    let mut rng = derive_rng(13, 0x0ac1e);
    let thresholds = PseudoThresholds::new(0.25, 0.75)?;
    let mut ok = true;
    for _ in 0..1000 {
        let k = rng.random_range(2..=8);
        let raw: Vec<f64> = (0..k)
            .map(|_| rng.random_range(0.0..1.0f64).powi(3))
            .collect();
        let z: f64 = raw.iter().sum::<f64>().max(f64::MIN_POSITIVE);
        let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let h = normalized_entropy(&p)?;
        ok &= (0.0..=1.0).contains(&h);
        pseudo_label_row(&p, &thresholds)?;
    }
    let uniform = normalized_entropy(&[0.25; 4])?;
    let one_hot = normalized_entropy(&[0.0, 1.0, 0.0])?;
    ok &= (uniform - 1.0).abs() < 1e-12 && one_hot == 0.0;
    let labels = [
        PseudoLabel::Known(0),
        PseudoLabel::Unknown,
        PseudoLabel::Uncertain,
    ];
    ok &= TagCounts::of(&labels).total() == 3;
    Ok(CheckOutcome::new(
        "pseudo-label entropy bounds",
        ok,
        "1000 random distributions, uniform and one-hot endpoints".into(),
    ))
}

fn ema_check() -> Result<CheckOutcome> {
    let config = NetworkConfig {
        input_dim: 2,
        hidden_dim: 3,
        feature_dim: 2,
        num_known_classes: 2,
        projection_hidden_dim: 2,
        projection_dim: 2,
    };
    let alpha = 0.99;
    let mut worst = 0.0f64;
    for steps in [1u32, 10, 1000] {
        let w0 = ComposedModel::init(config, &mut derive_rng(1, 0))?;
        let s = ComposedModel::init(config, &mut derive_rng(2, 0))?;
        let mut pair = StudentTeacherPair::from_parts(s.clone(), w0.clone(), alpha)?;
        for _ in 0..steps {
            pair.ema_update()?;
        }
        let at = alpha.powi(steps as i32);
        for ((_, t), ((_, w), (_, sv))) in pair
            .teacher()
            .params()
            .iter()
            .zip(w0.params().iter().zip(s.params().iter()))
        {
            for ((tv, wv), svv) in t.data().iter().zip(w.data()).zip(sv.data()) {
                worst = worst.max((tv - (at * wv + (1.0 - at) * svv)).abs());
            }
        }
    }
    Ok(CheckOutcome::new(
        "teacher EMA closed form",
        worst < 1e-10,
        format!("1, 10, 1000 steps, max abs error {worst:.2e}"),
    ))
}

/// Runs every check; `gradient_seeds` problems per gradient check.
pub fn run_selftest(gradient_seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = gradient_checks(gradient_seeds)?;
    out.extend(contrastive_oracle()?);
    out.push(pseudo_label_checks()?);
    out.push(ema_check()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_selftest(3).unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
