//! Seeded synthetic source data and the online target stream.
//!
//! Every class is an isotropic Gaussian around a fixed mean. Target samples
//! come from the shared and target-private classes and pass through the
//! scenario's [`DomainTransform`]. Adaptation code only ever sees
//! [`UnlabeledBatch`]; ground truth travels separately in [`BatchTruth`].

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scenario::{ClassSplit, DomainTransform, ScenarioConfig};

/// RNG sub-streams, one per purpose, so changing one consumer never shifts
/// the draws of another.
pub mod rng_stream {
    pub const SOURCE_DATA: u64 = 1;
    pub const TARGET_DATA: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const PRETRAIN_SHUFFLE: u64 = 4;
    pub const PROJECTION_INIT: u64 = 5;
    pub const AUGMENT_BASE: u64 = 1 << 32;
}

/// Deterministic generator for `(seed, purpose)`.
pub fn derive_rng(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// Ground-truth or predicted class. `Unknown` is any class outside the
/// source label space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Known(usize),
    Unknown,
}

impl Label {
    /// Index form with `Unknown` encoded as `num_known`.
    pub fn index(self, num_known: usize) -> usize {
        match self {
            Label::Known(c) => c,
            Label::Unknown => num_known,
        }
    }

    pub fn is_known(self) -> bool {
        matches!(self, Label::Known(_))
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Label::Known(c) => s.serialize_u64(*c as u64),
            Label::Unknown => s.serialize_str("unknown"),
        }
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Index(usize),
            Name(String),
        }
        match Repr::deserialize(d)? {
            Repr::Index(c) => Ok(Label::Known(c)),
            Repr::Name(n) if n == "unknown" => Ok(Label::Unknown),
            Repr::Name(n) => Err(serde::de::Error::custom(format!("invalid label {n:?}"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Known(c) => write!(f, "{c}"),
            Label::Unknown => f.write_str("unknown"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub x: Tensor,
    pub label: Label,
}

/// Class means. With enough dimensions every class sits on its own axis at
/// distance `separation/√2` from the origin, so all pairwise distances equal
/// `separation`. Otherwise classes are spread on a circle in the first two
/// coordinates with neighbouring chords of length `separation`.
pub fn class_means(num_classes: usize, input_dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|k| {
            let mut m = vec![0.0; input_dim];
            if input_dim >= num_classes {
                m[k] = separation / std::f64::consts::SQRT_2;
            } else if input_dim == 1 {
                m[0] = k as f64 * separation;
            } else {
                let step = std::f64::consts::TAU / num_classes as f64;
                let radius = separation / (2.0 * (step / 2.0).sin());
                m[0] = radius * (k as f64 * step).cos();
                m[1] = radius * (k as f64 * step).sin();
            }
            m
        })
        .collect()
}

fn gaussian_row<R: Rng>(rng: &mut R, mean: &[f64], sigma: f64) -> Vec<f64> {
    mean.iter()
        .map(|&m| {
            let z: f64 = StandardNormal.sample(rng);
            m + sigma * z
        })
        .collect()
}

/// Applies the affine part of a domain transform: plane rotations, per-axis
/// scale, then translation along the unit diagonal (in units of `sigma`).
pub fn apply_affine(t: &DomainTransform, x: &mut [f64], sigma: f64) {
    let d = x.len();
    let (s, c) = t.rotation_deg.to_radians().sin_cos();
    for p in (0..d.saturating_sub(1)).step_by(2) {
        let (a, b) = (x[p], x[p + 1]);
        x[p] = c * a - s * b;
        x[p + 1] = s * a + c * b;
    }
    for (i, v) in x.iter_mut().enumerate() {
        let scale = if t.scale.len() == 1 {
            t.scale[0]
        } else {
            t.scale[i]
        };
        *v *= scale;
    }
    let offset = t.translation * sigma / (d as f64).sqrt();
    for v in x.iter_mut() {
        *v += offset;
    }
}

#[derive(Debug, Clone)]
pub struct SourceDataset {
    pub examples: Vec<LabeledExample>,
    pub num_known: usize,
}

impl SourceDataset {
    /// Validates externally supplied examples: every label known and below
    /// `num_known`, every input `input_dim` wide, every class present.
    pub fn from_examples(
        examples: Vec<LabeledExample>,
        num_known: usize,
        input_dim: usize,
    ) -> Result<Self> {
        let mut seen = vec![false; num_known];
        for (i, e) in examples.iter().enumerate() {
            if e.x.len() != input_dim {
                return Err(Error::Data(format!(
                    "example {i} has {} features, expected {input_dim}",
                    e.x.len()
                )));
            }
            match e.label {
                Label::Known(c) if c < num_known => seen[c] = true,
                l => {
                    return Err(Error::Data(format!(
                        "example {i} has label {l:?}, expected a class below {num_known}"
                    )))
                }
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!("class {c} has no source examples")));
        }
        Ok(SourceDataset {
            examples,
            num_known,
        })
    }

    pub fn inputs(&self) -> Result<Tensor> {
        stack(self.examples.iter().map(|e| &e.x))
    }

    /// Class index of every example.
    pub fn class_indices(&self) -> Vec<usize> {
        self.examples
            .iter()
            .map(|e| e.label.index(self.num_known))
            .collect()
    }
}

fn stack<'a>(rows: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = rows.map(|t| t.data().to_vec()).collect();
    Tensor::from_rows(&rows)
}

/// Balanced labeled source set, interleaved by class. Classes receive
/// `source_samples / |Y_s|` examples, with the remainder going to the lowest
/// class ids.
pub fn generate_source_dataset(scenario: &ScenarioConfig, seed: u64) -> Result<SourceDataset> {
    let num_known = scenario.split.num_known();
    if num_known < 2 {
        return Err(Error::Config(format!(
            "need at least 2 source classes, got {num_known}"
        )));
    }
    let d = &scenario.data;
    let means = class_means(scenario.split.num_total(), d.input_dim, d.separation);
    let mut rng = derive_rng(seed, rng_stream::SOURCE_DATA);
    let examples = (0..d.source_samples)
        .map(|i| {
            let c = i % num_known;
            LabeledExample {
                x: Tensor::vector(gaussian_row(&mut rng, &means[c], d.sigma)),
                label: Label::Known(c),
            }
        })
        .collect();
    Ok(SourceDataset {
        examples,
        num_known,
    })
}

/// Inputs of one target batch. This is all the adaptation path receives.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledBatch {
    pub index: usize,
    pub inputs: Tensor,
}

impl UnlabeledBatch {
    pub fn len(&self) -> usize {
        self.inputs.row_view().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ground truth for one target batch, for metrics only.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTruth {
    pub index: usize,
    pub labels: Vec<Label>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetBatch {
    inputs: UnlabeledBatch,
    truth: BatchTruth,
}

impl TargetBatch {
    pub fn index(&self) -> usize {
        self.inputs.index
    }

    pub fn into_parts(self) -> (UnlabeledBatch, BatchTruth) {
        (self.inputs, self.truth)
    }
}

/// Single-pass stream of target batches. Taking a batch moves it out; there
/// is no way to revisit or peek ahead.
#[derive(Debug)]
pub struct TargetStream {
    batches: std::vec::IntoIter<TargetBatch>,
    split: ClassSplit,
}

impl TargetStream {
    pub fn split(&self) -> &ClassSplit {
        &self.split
    }

    pub fn remaining(&self) -> usize {
        self.batches.len()
    }
}

impl Iterator for TargetStream {
    type Item = TargetBatch;

    fn next(&mut self) -> Option<TargetBatch> {
        self.batches.next()
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.batches.size_hint()
    }
}

impl ExactSizeIterator for TargetStream {}

/// Draws `num_batches × batch_size` target samples i.i.d. (class uniform over
/// the target label space) and chunks them into batches. The sample sequence
/// depends only on the seed and data settings, not on the batch size.
pub fn generate_target_stream(scenario: &ScenarioConfig, seed: u64) -> Result<TargetStream> {
    let split = scenario.split;
    let classes = split.target_classes();
    if classes.is_empty() {
        return Err(Error::Config("target label space is empty".into()));
    }
    let d = &scenario.data;
    let num_known = split.num_known();
    let means = class_means(split.num_total(), d.input_dim, d.separation);
    let mut rng = derive_rng(seed, rng_stream::TARGET_DATA);
    let bs = scenario.stream.batch_size;
    let total = scenario.stream.num_samples();

    let mut rows = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for _ in 0..total {
        let c = classes[rng.random_range(0..classes.len())];
        let mut x = gaussian_row(&mut rng, &means[c], d.sigma);
        apply_affine(&scenario.shift, &mut x, d.sigma);
        if scenario.shift.noise > 0.0 {
            for v in x.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += scenario.shift.noise * d.sigma * z;
            }
        }
        rows.push(x);
        labels.push(if c < num_known {
            Label::Known(c)
        } else {
            Label::Unknown
        });
    }

    let mut batches = Vec::with_capacity(total.div_ceil(bs));
    for (index, (xs, ys)) in rows.chunks(bs).zip(labels.chunks(bs)).enumerate() {
        batches.push(TargetBatch {
            inputs: UnlabeledBatch {
                index,
                inputs: Tensor::from_rows(xs)?,
            },
            truth: BatchTruth {
                index,
                labels: ys.to_vec(),
            },
        });
    }
    Ok(TargetStream {
        batches: batches.into_iter(),
        split,
    })
}

/// Input-space Gaussian jitter.
pub fn augment<R: Rng>(x: &Tensor, sigma: f64, rng: &mut R) -> Tensor {
    if sigma == 0.0 {
        return x.clone();
    }
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sigma * z
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// The augmentation RNG for a given batch of a run.
pub fn augment_rng(seed: u64, batch_index: usize) -> ChaCha8Rng {
    derive_rng(seed, rng_stream::AUGMENT_BASE + batch_index as u64)
}

/// Writes examples as CSV: `x0,…,x{d-1},label`, with `label` a class index or
/// `unknown`.
pub fn write_dataset_csv<W: std::io::Write>(examples: &[LabeledExample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dim = examples.first().map_or(0, |e| e.x.len());
    let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for e in examples {
        if e.x.len() != dim {
            return Err(Error::Data("examples have differing dimensions".into()));
        }
        let mut rec: Vec<String> = e.x.data().iter().map(|v| format!("{v:?}")).collect();
        rec.push(e.label.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<dataset csv>", e))?;
    Ok(())
}

/// Parses the format written by [`write_dataset_csv`].
pub fn parse_dataset_csv(text: &str) -> Result<Vec<LabeledExample>> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    let n = header.len();
    if n < 2 || header.get(n - 1) != Some("label") {
        return Err(Error::Data(
            "dataset header must end with a label column".into(),
        ));
    }
    for (i, h) in header.iter().take(n - 1).enumerate() {
        if h != format!("x{i}") {
            return Err(Error::Data(format!(
                "unexpected column {h:?} at position {i}"
            )));
        }
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != n {
            return Err(Error::Data(format!(
                "row {}: expected {n} fields",
                line + 1
            )));
        }
        let mut x = Vec::with_capacity(n - 1);
        for field in rec.iter().take(n - 1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("row {}: bad number {field:?}", line + 1)))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("row {}: non-finite value", line + 1)));
            }
            x.push(v);
        }
        let label = match rec.get(n - 1).unwrap_or("").trim() {
            "unknown" => Label::Unknown,
            s => Label::Known(
                s.parse()
                    .map_err(|_| Error::Data(format!("row {}: bad label {s:?}", line + 1)))?,
            ),
        };
        out.push(LabeledExample {
            x: Tensor::vector(x),
            label,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(shared: usize, sp: usize, tp: usize) -> ScenarioConfig {
        let mut s = ScenarioConfig {
            split: ClassSplit {
                shared,
                source_private: sp,
                target_private: tp,
            },
            ..ScenarioConfig::default()
        };
        s.stream.batch_size = 32;
        s.stream.num_batches = 20;
        s
    }

    #[test]
    fn source_is_deterministic_and_balanced() {
        let mut s = scenario(6, 0, 3);
        s.data.source_samples = 600;
        let a = generate_source_dataset(&s, 5).unwrap();
        let b = generate_source_dataset(&s, 5).unwrap();
        assert_eq!(a.examples, b.examples);
        let mut counts = [0usize; 6];
        for e in &a.examples {
            match e.label {
                Label::Known(c) => counts[c] += 1,
                Label::Unknown => panic!("unknown in source"),
            }
        }
        assert_eq!(counts, [100; 6]);
    }

    #[test]
    fn means_respect_separation() {
        for (k, d) in [(12, 2), (12, 12), (9, 16), (4, 1)] {
            let m = class_means(k, d, 3.0);
            for i in 0..k {
                for j in i + 1..k {
                    let dist: f64 = m[i]
                        .iter()
                        .zip(&m[j])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    assert!(dist >= 3.0 - 1e-9, "k={k} d={d} ({i},{j}) {dist}");
                }
            }
        }
    }

    #[test]
    fn too_few_source_classes() {
        let s = scenario(1, 0, 2);
        assert!(generate_source_dataset(&s, 1).is_err());
    }

    #[test]
    fn pda_stream_has_no_unknowns() {
        let s = scenario(6, 6, 0);
        let stream = generate_target_stream(&s, 3).unwrap();
        for b in stream {
            let (_, truth) = b.into_parts();
            assert!(truth.labels.iter().all(|l| l.is_known()));
        }
    }

    #[test]
    fn opda_stream_realizes_split() {
        let s = scenario(6, 3, 3);
        let mut seen = std::collections::BTreeSet::new();
        let mut unknown = 0;
        for b in generate_target_stream(&s, 3).unwrap() {
            for l in b.into_parts().1.labels {
                match l {
                    Label::Known(c) => {
                        assert!(c < 6, "source-private class {c} leaked into target");
                        seen.insert(c);
                    }
                    Label::Unknown => unknown += 1,
                }
            }
        }
        assert_eq!(seen.len(), 6);
        assert!(unknown > 0);
    }

    #[test]
    fn identity_shift_matches_source_distribution() {
        let mut s = scenario(3, 0, 2);
        s.shift = DomainTransform::identity();
        s.data.input_dim = 5;
        s.stream.num_batches = 200;
        let means = class_means(5, 5, s.data.separation);
        let mut sums = vec![vec![0.0; 5]; 3];
        let mut sq = [0.0; 3];
        let mut counts = [0usize; 3];
        for b in generate_target_stream(&s, 9).unwrap() {
            let (x, t) = b.into_parts();
            for (row, l) in x.inputs.rows().zip(&t.labels) {
                if let Label::Known(c) = l {
                    counts[*c] += 1;
                    for (k, v) in row.iter().enumerate() {
                        sums[*c][k] += v;
                        sq[*c] += (v - means[*c][k]).powi(2);
                    }
                }
            }
        }
        for c in 0..3 {
            let n = counts[c] as f64;
            for k in 0..5 {
                assert!(
                    (sums[c][k] / n - means[c][k]).abs() < 0.1,
                    "class {c} dim {k}"
                );
            }
            let var = sq[c] / (n * 5.0);
            assert!((var - 1.0).abs() < 0.05, "class {c} variance {var}");
        }
    }

    #[test]
    fn stream_is_single_pass() {
        let s = scenario(6, 3, 3);
        let mut stream = generate_target_stream(&s, 1).unwrap();
        assert_eq!(stream.remaining(), 20);
        let first = stream.next().unwrap();
        assert_eq!(first.index(), 0);
        assert_eq!(stream.remaining(), 19);
        assert_eq!(stream.next().unwrap().index(), 1);
    }

    #[test]
    fn sample_sequence_independent_of_batch_size() {
        let mut a = scenario(6, 3, 3);
        a.stream.batch_size = 32;
        a.stream.num_batches = 4;
        let mut b = a.clone();
        b.stream.batch_size = 8;
        b.stream.num_batches = 16;
        let flat = |s: &ScenarioConfig| -> Vec<f64> {
            generate_target_stream(s, 4)
                .unwrap()
                .flat_map(|b| b.into_parts().0.inputs.into_data())
                .collect()
        };
        assert_eq!(flat(&a), flat(&b));
    }

    #[test]
    fn augment_zero_sigma_is_identity() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]);
        assert_eq!(augment(&x, 0.0, &mut augment_rng(1, 0)), x);
    }

    #[test]
    fn augment_is_deterministic_per_seed_stream() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let a = augment(&x, 0.3, &mut augment_rng(7, 4));
        let b = augment(&x, 0.3, &mut augment_rng(7, 4));
        let c = augment(&x, 0.3, &mut augment_rng(7, 5));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn augment_norm_matches_chi_mean() {
        // E‖σ z‖ for z ~ N(0, I_d) is σ·√2·Γ((d+1)/2)/Γ(d/2); for d = 16 this
        // is within 2% of σ·√d.
        let d = 16;
        let sigma = 0.1;
        let x = Tensor::vector(vec![0.5; d]);
        let mut rng = augment_rng(11, 0);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let a = augment(&x, sigma, &mut rng);
                a.sub(&x)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / n as f64;
        let expected = sigma * (d as f64).sqrt();
        assert!(
            (mean - expected).abs() < 0.1 * expected,
            "{mean} vs {expected}"
        );
    }

    #[test]
    fn csv_round_trip() {
        let s = scenario(3, 1, 1);
        let ds = generate_source_dataset(&s, 2).unwrap();
        let mut buf = Vec::new();
        let mut examples = ds.examples[..10].to_vec();
        examples[3].label = Label::Unknown;
        write_dataset_csv(&examples, &mut buf).unwrap();
        let back = parse_dataset_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, examples);
    }

    #[test]
    fn external_examples_are_validated() {
        let ex = |x: Vec<f64>, label| LabeledExample {
            x: Tensor::vector(x),
            label,
        };
        let ok = vec![
            ex(vec![0.0, 1.0], Label::Known(0)),
            ex(vec![1.0, 0.0], Label::Known(1)),
        ];
        assert!(SourceDataset::from_examples(ok.clone(), 2, 2).is_ok());
        assert!(SourceDataset::from_examples(ok.clone(), 2, 3).is_err());
        assert!(SourceDataset::from_examples(ok.clone(), 3, 2).is_err());
        let mut bad = ok;
        bad.push(ex(vec![0.5, 0.5], Label::Unknown));
        assert!(SourceDataset::from_examples(bad, 2, 2).is_err());
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(parse_dataset_csv("a,b\n1,2\n").is_err());
        assert!(parse_dataset_csv("x0,label\nfoo,1\n").is_err());
        assert!(parse_dataset_csv("x0,label\n1.0,-3\n").is_err());
        assert!(parse_dataset_csv("x0,label\nNaN,1\n").is_err());
    }
}
