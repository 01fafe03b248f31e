//! Accuracy and H-score, parameter sweeps, and result files.
//!
//! Sweep tables are CSV with the columns `variant,axis,value,seed,metric,score`.
//! The aggregated table has `variant,axis,value,seeds,metric,mean`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{pretrain_for_scenario, run_experiment, PretrainOutcome, RunSummary, Variant};
use crate::error::{Error, Result};
use crate::scenario::ScenarioConfig;
use crate::stream::Label;

fn check_lengths(predictions: &[Label], truth: &[Label]) -> Result<()> {
    if predictions.len() != truth.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} ground-truth labels",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Metric("no samples to score".into()));
    }
    Ok(())
}

/// Fraction of exact matches; `Unknown` is a label like any other.
pub fn accuracy(predictions: &[Label], truth: &[Label]) -> Result<f64> {
    check_lengths(predictions, truth)?;
    let hits = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// `2·a·b/(a+b)`, or 0 when both are 0.
pub fn harmonic_mean(a_known: f64, a_unknown: f64) -> f64 {
    let s = a_known + a_unknown;
    if s > 0.0 {
        2.0 * a_known * a_unknown / s
    } else {
        0.0
    }
}

/// Harmonic mean of the accuracy on ground-truth-known samples and the
/// rejection rate on ground-truth-unknown samples.
pub fn h_score(predictions: &[Label], truth: &[Label]) -> Result<f64> {
    check_lengths(predictions, truth)?;
    let (mut nk, mut ck, mut nu, mut cu) = (0usize, 0usize, 0usize, 0usize);
    for (p, t) in predictions.iter().zip(truth) {
        if t.is_known() {
            nk += 1;
            ck += usize::from(p == t);
        } else {
            nu += 1;
            cu += usize::from(*p == Label::Unknown);
        }
    }
    if nk == 0 || nu == 0 {
        return Err(Error::Metric(
            "H-score needs both known and unknown ground truth; use accuracy for partial splits"
                .into(),
        ));
    }
    Ok(harmonic_mean(ck as f64 / nk as f64, cu as f64 / nu as f64))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub total: usize,
    pub known: usize,
    pub unknown: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub label: Label,
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy_all: f64,
    pub accuracy_known: Option<f64>,
    pub accuracy_unknown: Option<f64>,
    /// Present only when the ground truth has both known and unknown samples.
    pub h_score: Option<f64>,
    pub per_class: Vec<ClassAccuracy>,
    pub counts: SampleCounts,
}

impl MetricSummary {
    pub fn compute(predictions: &[Label], truth: &[Label], num_known: usize) -> Result<Self> {
        check_lengths(predictions, truth)?;
        let mut per: BTreeMap<Label, (usize, usize)> = BTreeMap::new();
        for (p, t) in predictions.iter().zip(truth) {
            if let Label::Known(c) = t {
                if *c >= num_known {
                    return Err(Error::Metric(format!(
                        "ground-truth class {c} outside source classes"
                    )));
                }
            }
            let e = per.entry(*t).or_default();
            e.0 += 1;
            e.1 += usize::from(p == t);
        }
        let (mut nk, mut ck) = (0, 0);
        let (mut nu, mut cu) = (0, 0);
        for (label, &(n, c)) in &per {
            if label.is_known() {
                nk += n;
                ck += c;
            } else {
                nu += n;
                cu += c;
            }
        }
        let accuracy_known = (nk > 0).then(|| ck as f64 / nk as f64);
        let accuracy_unknown = (nu > 0).then(|| cu as f64 / nu as f64);
        let h_score = match (accuracy_known, accuracy_unknown) {
            (Some(a), Some(b)) => Some(harmonic_mean(a, b)),
            _ => None,
        };
        Ok(MetricSummary {
            accuracy_all: (ck + cu) as f64 / truth.len() as f64,
            accuracy_known,
            accuracy_unknown,
            h_score,
            per_class: per
                .into_iter()
                .map(|(label, (samples, correct))| ClassAccuracy {
                    label,
                    samples,
                    correct,
                    accuracy: correct as f64 / samples as f64,
                })
                .collect(),
            counts: SampleCounts {
                total: truth.len(),
                known: nk,
                unknown: nu,
            },
        })
    }
}

/// Pooled metrics over a growing prefix of the stream.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMetrics {
    pub samples: usize,
    pub correct: usize,
    pub known: usize,
    pub known_correct: usize,
    pub unknown: usize,
    pub unknown_correct: usize,
    pub accuracy: f64,
    pub h_score: Option<f64>,
}

impl RunningMetrics {
    pub fn extend(
        &mut self,
        predictions: impl IntoIterator<Item = Label>,
        truth: impl IntoIterator<Item = Label>,
    ) {
        for (p, t) in predictions.into_iter().zip(truth) {
            let hit = usize::from(p == t);
            self.samples += 1;
            self.correct += hit;
            if t.is_known() {
                self.known += 1;
                self.known_correct += hit;
            } else {
                self.unknown += 1;
                self.unknown_correct += hit;
            }
        }
        self.accuracy = if self.samples > 0 {
            self.correct as f64 / self.samples as f64
        } else {
            0.0
        };
        self.h_score = (self.known > 0 && self.unknown > 0).then(|| {
            harmonic_mean(
                self.known_correct as f64 / self.known as f64,
                self.unknown_correct as f64 / self.unknown as f64,
            )
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    BatchSize,
    Alpha,
    Delta,
    /// `delta_l:delta_u` pairs.
    DeltaLU,
    /// `lc`, `le` or `lc+le`.
    LossCombo,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::BatchSize,
        SweepAxis::Alpha,
        SweepAxis::Delta,
        SweepAxis::DeltaLU,
        SweepAxis::LossCombo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Delta => "delta",
            SweepAxis::DeltaLU => "delta_l_u",
            SweepAxis::LossCombo => "loss_combo",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::BatchSize => &["128", "64", "32", "16", "8"],
            SweepAxis::Alpha => &["0.99", "0.995", "0.999", "0.9995", "0.9999"],
            SweepAxis::Delta => &["0.4", "0.45", "0.5", "0.55", "0.6"],
            SweepAxis::DeltaLU => &["0.15:0.85", "0.2:0.8", "0.25:0.75", "0.3:0.7", "0.35:0.65"],
            SweepAxis::LossCombo => &["lc", "le", "lc+le"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// The scenario with this axis set to `value`. Batch-size points keep the
    /// total number of stream samples fixed.
    pub fn apply(self, scenario: &ScenarioConfig, value: &str) -> Result<ScenarioConfig> {
        let bad = || Error::Config(format!("invalid {} value {value:?}", self.as_str()));
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        let mut s = scenario.clone();
        match self {
            SweepAxis::BatchSize => {
                let b: usize = value.trim().parse().map_err(|_| bad())?;
                if b == 0 {
                    return Err(bad());
                }
                let total = scenario.stream.num_samples();
                s.stream.batch_size = b;
                s.stream.num_batches = (total / b).max(1);
            }
            SweepAxis::Alpha => s.hyper.alpha = num(value)?,
            SweepAxis::Delta => s.hyper.delta = num(value)?,
            SweepAxis::DeltaLU => {
                let (l, u) = value.split_once(':').ok_or_else(bad)?;
                s.hyper.delta_l = num(l)?;
                s.hyper.delta_u = num(u)?;
            }
            SweepAxis::LossCombo => {
                let (c, e) = match value.trim() {
                    "lc" => (true, false),
                    "le" => (false, true),
                    "lc+le" => (true, true),
                    _ => return Err(bad()),
                };
                s.hyper.use_contrastive = c;
                s.hyper.use_entropy = e;
            }
        }
        s.validate()?;
        Ok(s)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown sweep axis {s:?}; expected batch_size, alpha, delta, delta_l_u or loss_combo"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub axis: SweepAxis,
    pub value: String,
    pub seed: u64,
    pub metric: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMean {
    pub variant: Variant,
    pub axis: SweepAxis,
    pub value: String,
    pub seeds: usize,
    pub metric: String,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub summaries: Vec<RunSummary>,
}

impl SweepTable {
    /// Seed-averaged score per (variant, value), in value order of first
    /// appearance.
    pub fn means(&self) -> Vec<SweepMean> {
        let mut order: Vec<(Variant, String)> = Vec::new();
        let mut acc: BTreeMap<(Variant, String), (f64, usize, String)> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.variant, r.value.clone());
            let e = acc.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                (0.0, 0, r.metric.clone())
            });
            e.0 += r.score;
            e.1 += 1;
        }
        order.sort_by_key(|(v, _)| *v);
        order
            .into_iter()
            .map(|key| {
                let (sum, n, metric) = acc[&key].clone();
                SweepMean {
                    variant: key.0,
                    axis: self.axis,
                    value: key.1,
                    seeds: n,
                    metric,
                    mean: sum / n as f64,
                }
            })
            .collect()
    }

    pub fn mean_of(&self, variant: Variant, value: &str) -> Option<f64> {
        self.means()
            .into_iter()
            .find(|m| m.variant == variant && m.value == value)
            .map(|m| m.mean)
    }

    pub fn rows_csv(&self) -> Result<Vec<u8>> {
        to_csv(&self.rows)
    }

    pub fn means_csv(&self) -> Result<Vec<u8>> {
        to_csv(&self.means())
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

/// Which runs a sweep performs.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Worker threads; `None` uses all cores.
    pub jobs: Option<usize>,
}

/// One experiment per (variant, value, seed). Pre-training is shared by all
/// points of a seed, which is sound because no axis touches it. Output order
/// does not depend on `jobs`.
pub fn run_sweep(scenario: &ScenarioConfig, plan: &SweepPlan) -> Result<SweepTable> {
    let points = sweep_values(scenario, plan)?;
    worker_pool(plan.jobs)?.install(|| {
        let sources: Vec<PretrainOutcome> = plan
            .seeds
            .par_iter()
            .map(|&seed| pretrain_for_scenario(scenario, seed))
            .collect::<Result<_>>()?;
        sweep_points(&points, plan, &sources)
    })
}

/// [`run_sweep`] with one pre-trained source model per entry of
/// `plan.seeds`, in the same order.
pub fn run_sweep_pretrained(
    scenario: &ScenarioConfig,
    plan: &SweepPlan,
    sources: &[PretrainOutcome],
) -> Result<SweepTable> {
    if sources.len() != plan.seeds.len() {
        return Err(Error::Config(format!(
            "{} source models for {} seeds",
            sources.len(),
            plan.seeds.len()
        )));
    }
    let points = sweep_values(scenario, plan)?;
    worker_pool(plan.jobs)?.install(|| sweep_points(&points, plan, sources))
}

fn sweep_values(
    scenario: &ScenarioConfig,
    plan: &SweepPlan,
) -> Result<Vec<(String, ScenarioConfig)>> {
    plan.values
        .iter()
        .map(|v| Ok((v.clone(), plan.axis.apply(scenario, v)?)))
        .collect()
}

fn worker_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot start sweep workers: {e}")))
}

fn sweep_points(
    points: &[(String, ScenarioConfig)],
    plan: &SweepPlan,
    sources: &[PretrainOutcome],
) -> Result<SweepTable> {
    let mut jobs = Vec::new();
    for variant in &plan.variants {
        for (value, point) in points {
            for (seed, source) in plan.seeds.iter().zip(sources) {
                jobs.push((*variant, value, point, *seed, source));
            }
        }
    }
    let summaries: Vec<RunSummary> = jobs
        .par_iter()
        .map(|(variant, _, point, seed, source)| {
            run_experiment(point, *variant, *seed, Some(source)).map(|e| e.summary)
        })
        .collect::<Result<_>>()?;
    let rows = jobs
        .iter()
        .zip(&summaries)
        .map(|((variant, value, _, seed, _), s)| SweepRow {
            variant: *variant,
            axis: plan.axis,
            value: (*value).clone(),
            seed: *seed,
            metric: s.primary_metric.clone(),
            score: s.score,
        })
        .collect();
    Ok(SweepTable {
        axis: plan.axis,
        rows,
        summaries,
    })
}

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}
