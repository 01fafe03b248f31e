//! Source pre-training, the online adaptation loop, entropy-gated inference,
//! and the source-only baseline.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{adaptation_loss_on, LossSettings};
use crate::model::{ComposedModel, GraphModel, NetworkConfig, StudentTeacherPair};
use crate::numerics::{Graph, SgdMomentum, Tensor};
use crate::prototypes::{PrototypeBank, PrototypeMode};
use crate::pseudo::{
    argmax, assign_pseudo_labels, normalized_entropy, PseudoLabel, PseudoThresholds, TagCounts,
};
use crate::report::{MetricSummary, RunningMetrics};
use crate::scenario::{
    CategoryShift, HyperParams, PretrainConfig, PrototypeFeatures, ScenarioConfig,
};
use crate::stream::{
    augment, augment_rng, derive_rng, generate_source_dataset, generate_target_stream, rng_stream,
    Label, LabeledExample, SourceDataset, UnlabeledBatch,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Frozen source prototypes.
    CometP,
    /// Running target prototypes; no source information after pre-training.
    CometF,
    SourceOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::CometP, Variant::CometF, Variant::SourceOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::CometP => "comet-p",
            Variant::CometF => "comet-f",
            Variant::SourceOnly => "source-only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected comet-p, comet-f or source-only"
                ))
            })
    }
}

/// A source model together with its class prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub model: ComposedModel,
    pub prototypes: PrototypeBank,
    pub validation_accuracy: f64,
    pub epochs_run: usize,
}

fn cross_entropy_step(
    model: &mut ComposedModel,
    opt: &mut SgdMomentum,
    x: Tensor,
    labels: &[usize],
) -> Result<f64> {
    let k = model.config().num_known_classes;
    let n = labels.len();
    let mut one_hot = vec![0.0; n * k];
    for (i, &c) in labels.iter().enumerate() {
        one_hot[i * k + c] = 1.0;
    }
    let mut g = Graph::new();
    let vars = model.params().register(&mut g);
    let gm = GraphModel::new(&vars);
    let xv = g.constant(x);
    let f = gm.features(&mut g, xv)?;
    let logits = gm.logits(&mut g, f)?;
    let lp = g.log_softmax_rows(logits);
    let targets = g.constant(Tensor::matrix(n, k, one_hot)?);
    let picked = g.mul(lp, targets)?;
    let total = g.sum(picked);
    let loss = g.scale(total, -1.0 / n as f64);
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = g.backward(loss)?;
    opt.step(model.params_mut(), &grads)?;
    Ok(value)
}

fn closed_set_accuracy(model: &ComposedModel, examples: &[LabeledExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let rows: Vec<Vec<f64>> = examples.iter().map(|e| e.x.data().to_vec()).collect();
    let probs = model.predict_probs(&Tensor::from_rows(&rows)?)?;
    let correct = probs
        .rows()
        .zip(examples)
        .filter(|(p, e)| e.label == Label::Known(argmax(p)))
        .count();
    Ok(correct as f64 / examples.len() as f64)
}

/// Closed-set cross-entropy training on labeled source data with validation
/// early stopping. Returns the best-validation model and its source
/// prototypes, computed on all source samples.
pub fn pretrain_source(
    source: &SourceDataset,
    network: NetworkConfig,
    config: &PretrainConfig,
    validation_fraction: f64,
    seed: u64,
) -> Result<PretrainOutcome> {
    let n = source.examples.len();
    let n_val = ((n as f64) * validation_fraction).round() as usize;
    if n_val >= n {
        return Err(Error::Config(
            "validation split leaves no training data".into(),
        ));
    }
    let (train, val) = source.examples.split_at(n - n_val);
    let val = if val.is_empty() { train } else { val };

    let mut model = ComposedModel::init(network, &mut derive_rng(seed, rng_stream::MODEL_INIT))?;
    let mut opt = SgdMomentum::new(config.learning_rate, config.momentum, model.params())?;
    let mut shuffle_rng = derive_rng(seed, rng_stream::PRETRAIN_SHUFFLE);
    let mut best = model.clone();
    let mut best_acc = closed_set_accuracy(&model, val)?;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| train[i].x.data().to_vec()).collect();
            let labels = chunk
                .iter()
                .map(|&i| match train[i].label {
                    Label::Known(c) => Ok(c),
                    Label::Unknown => {
                        Err(Error::Data("source data contains unknown labels".into()))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let loss =
                cross_entropy_step(&mut model, &mut opt, Tensor::from_rows(&rows)?, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
        }
        epochs_run = epoch + 1;
        let acc = closed_set_accuracy(&model, val)?;
        if acc > best_acc {
            best_acc = acc;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let prototypes = PrototypeBank::from_source(&best, source)?;
    Ok(PretrainOutcome {
        model: best,
        prototypes,
        validation_accuracy: best_acc,
        epochs_run,
    })
}

/// Generates the scenario's source data for `seed` and pre-trains on it.
pub fn pretrain_for_scenario(scenario: &ScenarioConfig, seed: u64) -> Result<PretrainOutcome> {
    let source = generate_source_dataset(scenario, seed)?;
    pretrain_source(
        &source,
        scenario.network_config(),
        &scenario.pretrain,
        scenario.data.validation_fraction,
        seed,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub entropy: f64,
    pub max_prob: f64,
}

/// Argmax when the normalized entropy is at most `delta`, otherwise unknown.
pub fn infer(student: &ComposedModel, batch: &Tensor, delta: f64) -> Result<Vec<Prediction>> {
    let probs = student.predict_probs(batch)?;
    probs
        .rows()
        .map(|p| {
            let entropy = normalized_entropy(p)?;
            let top = argmax(p);
            let label = if entropy <= delta {
                Label::Known(top)
            } else {
                Label::Unknown
            };
            Ok(Prediction {
                label,
                entropy,
                max_prob: p[top],
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub contrastive: f64,
    pub entropy: f64,
    pub total: f64,
}

/// What one adaptation step produced, before ground truth is consulted.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub predictions: Vec<Prediction>,
    pub pseudo_labels: Vec<PseudoLabel>,
    /// Teacher argmax for every sample, tagged or not.
    pub teacher_argmax: Vec<usize>,
    pub losses: LossValues,
    /// False when the batch had no Known or Unknown tags.
    pub updated: bool,
}

/// Online adaptation state for one COMET run.
#[derive(Debug, Clone)]
pub struct Adapter {
    pair: StudentTeacherPair,
    bank: PrototypeBank,
    optimizer: SgdMomentum,
    hyper: HyperParams,
    settings: LossSettings,
    thresholds: PseudoThresholds,
    augment_sigma: f64,
    seed: u64,
    steps: usize,
}

impl Adapter {
    /// Starts from the source model with a freshly initialized projection
    /// head shared by student and teacher.
    pub fn new(
        source: &PretrainOutcome,
        variant: Variant,
        hyper: &HyperParams,
        augment_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        hyper.validate()?;
        let bank = match variant {
            Variant::CometP => source.prototypes.clone(),
            Variant::CometF => {
                let c = source.model.config();
                PrototypeBank::running(c.num_known_classes, c.feature_dim)
            }
            Variant::SourceOnly => {
                return Err(Error::Config("source-only runs do not adapt".into()));
            }
        };
        if variant == Variant::CometP && bank.mode() != PrototypeMode::Source {
            return Err(Error::Config("COMET-P needs source prototypes".into()));
        }
        let mut student = source.model.clone();
        student.reinit_projection(&mut derive_rng(seed, rng_stream::PROJECTION_INIT));
        let optimizer =
            SgdMomentum::new(hyper.learning_rate, hyper.sgd_momentum, student.params())?;
        Ok(Adapter {
            pair: StudentTeacherPair::new(student, hyper.alpha)?,
            bank,
            optimizer,
            hyper: hyper.clone(),
            settings: LossSettings::from_hyper(hyper)?,
            thresholds: PseudoThresholds::new(hyper.delta_l, hyper.delta_u)?,
            augment_sigma,
            seed,
            steps: 0,
        })
    }

    pub fn pair(&self) -> &StudentTeacherPair {
        &self.pair
    }

    pub fn prototypes(&self) -> &PrototypeBank {
        &self.bank
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One batch: predict, pseudo-label, update prototypes, one optimizer
    /// step on the student, then the teacher EMA.
    pub fn step(&mut self, batch: &UnlabeledBatch) -> Result<StepOutcome> {
        let x = &batch.inputs;
        let predictions = infer(self.pair.student(), x, self.hyper.delta)?;

        let teacher_probs = self.pair.teacher().predict_probs(x)?;
        let pseudo_labels = assign_pseudo_labels(&teacher_probs, &self.thresholds)?;
        let teacher_argmax = teacher_probs.rows().map(argmax).collect();

        if self.bank.mode() == PrototypeMode::Running {
            let source = match self.hyper.prototype_features {
                PrototypeFeatures::Teacher => self.pair.teacher(),
                PrototypeFeatures::Student => self.pair.student(),
            };
            let feats = source.forward_features(x)?;
            self.bank.update_running(&feats, &pseudo_labels)?;
        }

        let mut losses = LossValues::default();
        let updated = pseudo_labels.iter().any(|l| *l != PseudoLabel::Uncertain);
        if updated {
            let augmented = augment(
                x,
                self.augment_sigma,
                &mut augment_rng(self.seed, batch.index),
            );
            let mut g = Graph::new();
            let vars = self.pair.student().params().register(&mut g);
            let gm = GraphModel::new(&vars);
            let loss = adaptation_loss_on(
                &mut g,
                &gm,
                x,
                &augmented,
                &pseudo_labels,
                &self.bank,
                &self.settings,
            )?;
            if let Some(lc) = loss.contrastive {
                losses.contrastive = g.value(lc).item()?;
            }
            if let Some(le) = loss.entropy {
                losses.entropy = g.value(le).item()?;
            }
            let total = loss.total;
            losses.total = g.value(total).item()?;
            if !losses.total.is_finite() {
                return Err(Error::Diverged {
                    epoch: self.steps,
                    loss: losses.total,
                });
            }
            let grads = g.backward(total)?;
            self.optimizer
                .step(self.pair.student_mut().params_mut(), &grads)?;
        }
        self.pair.ema_update()?;
        self.steps += 1;

        Ok(StepOutcome {
            predictions,
            pseudo_labels,
            teacher_argmax,
            losses,
            updated,
        })
    }
}

/// How good the teacher's Known tags were on one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelQuality {
    pub known_tagged: usize,
    pub known_tag_correct: usize,
    pub samples: usize,
    /// Samples whose teacher argmax equals the ground truth.
    pub argmax_correct: usize,
}

impl PseudoLabelQuality {
    pub fn measure(tags: &[PseudoLabel], teacher_argmax: &[usize], truth: &[Label]) -> Self {
        let mut q = PseudoLabelQuality {
            samples: truth.len(),
            ..Default::default()
        };
        for ((tag, &top), &y) in tags.iter().zip(teacher_argmax).zip(truth) {
            if y == Label::Known(top) {
                q.argmax_correct += 1;
            }
            if let PseudoLabel::Known(c) = *tag {
                q.known_tagged += 1;
                if y == Label::Known(c) {
                    q.known_tag_correct += 1;
                }
            }
        }
        q
    }

    pub fn merge(&mut self, other: &Self) {
        self.known_tagged += other.known_tagged;
        self.known_tag_correct += other.known_tag_correct;
        self.samples += other.samples;
        self.argmax_correct += other.argmax_correct;
    }

    pub fn known_precision(&self) -> Option<f64> {
        (self.known_tagged > 0).then(|| self.known_tag_correct as f64 / self.known_tagged as f64)
    }

    pub fn argmax_accuracy(&self) -> Option<f64> {
        (self.samples > 0).then(|| self.argmax_correct as f64 / self.samples as f64)
    }
}

/// One line of a run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: usize,
    pub predictions: Vec<Prediction>,
    pub truth: Vec<Label>,
    pub tags: TagCounts,
    pub losses: Option<LossValues>,
    pub pseudo_quality: Option<PseudoLabelQuality>,
    /// Metrics over all batches so far, this one included.
    pub running: RunningMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub variant: Variant,
    pub seed: u64,
    pub scenario: ScenarioConfig,
}

/// Append-only log of a run: one [`BatchRecord`] per consumed batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub header: RunHeader,
    pub batches: Vec<BatchRecord>,
}

impl RunRecord {
    fn new(scenario: &ScenarioConfig, variant: Variant, seed: u64) -> Self {
        RunRecord {
            header: RunHeader {
                variant,
                seed,
                scenario: scenario.clone(),
            },
            batches: Vec::new(),
        }
    }

    /// All predicted labels, in stream order.
    pub fn predictions(&self) -> Vec<Label> {
        self.batches
            .iter()
            .flat_map(|b| b.predictions.iter().map(|p| p.label))
            .collect()
    }

    pub fn truth(&self) -> Vec<Label> {
        self.batches
            .iter()
            .flat_map(|b| b.truth.iter().copied())
            .collect()
    }

    /// Header line followed by one line per batch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for b in &self.batches {
            out.push_str(&serde_json::to_string(b)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("run log is empty".into()))?;
        let header: RunHeader = serde_json::from_str(header)?;
        let batches = lines
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<_>>()?;
        Ok(RunRecord { header, batches })
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        running: &mut RunningMetrics,
        index: usize,
        predictions: Vec<Prediction>,
        truth: Vec<Label>,
        tags: TagCounts,
        losses: Option<LossValues>,
        pseudo_quality: Option<PseudoLabelQuality>,
    ) {
        running.extend(predictions.iter().map(|p| p.label), truth.iter().copied());
        self.batches.push(BatchRecord {
            batch: index,
            predictions,
            truth,
            tags,
            losses,
            pseudo_quality,
            running: running.clone(),
        });
    }
}

/// Runs the frozen source model over a stream.
pub fn source_only_baseline(
    source_model: &ComposedModel,
    scenario: &ScenarioConfig,
    seed: u64,
) -> Result<RunRecord> {
    let mut record = RunRecord::new(scenario, Variant::SourceOnly, seed);
    let mut running = RunningMetrics::default();
    for batch in generate_target_stream(scenario, seed)? {
        let (batch, truth) = batch.into_parts();
        let predictions = infer(source_model, &batch.inputs, scenario.hyper.delta)?;
        let tags = TagCounts::default();
        record.push(
            &mut running,
            batch.index,
            predictions,
            truth.labels,
            tags,
            None,
            None,
        );
    }
    Ok(record)
}

/// Streams every batch of the scenario through a fresh [`Adapter`].
pub fn adapt_stream(
    source: &PretrainOutcome,
    scenario: &ScenarioConfig,
    variant: Variant,
    seed: u64,
) -> Result<RunRecord> {
    let mut adapter = Adapter::new(
        source,
        variant,
        &scenario.hyper,
        scenario.augment_sigma(),
        seed,
    )?;
    let mut record = RunRecord::new(scenario, variant, seed);
    let mut running = RunningMetrics::default();
    for batch in generate_target_stream(scenario, seed)? {
        let (batch, truth) = batch.into_parts();
        let out = adapter.step(&batch)?;
        let quality =
            PseudoLabelQuality::measure(&out.pseudo_labels, &out.teacher_argmax, &truth.labels);
        record.push(
            &mut running,
            batch.index,
            out.predictions,
            truth.labels,
            TagCounts::of(&out.pseudo_labels),
            Some(out.losses),
            Some(quality),
        );
    }
    Ok(record)
}

/// Pooled results of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub variant: Variant,
    pub seed: u64,
    pub category_shift: CategoryShift,
    pub batches: usize,
    pub samples: usize,
    /// `h_score` for open-set splits, `accuracy` otherwise.
    pub primary_metric: String,
    pub score: f64,
    pub metrics: MetricSummary,
    pub source_validation_accuracy: f64,
    pub tag_counts: TagCounts,
    pub pseudo_quality: Option<PseudoLabelQuality>,
}

impl RunSummary {
    pub fn from_record(record: &RunRecord, source_validation_accuracy: f64) -> Result<Self> {
        let scenario = &record.header.scenario;
        let num_known = scenario.split.num_known();
        let metrics = MetricSummary::compute(&record.predictions(), &record.truth(), num_known)?;
        let shift = scenario.split.category_shift();
        let (primary_metric, score) = match (shift, metrics.h_score) {
            (CategoryShift::Oda | CategoryShift::Opda, Some(h)) => ("h_score", h),
            _ => ("accuracy", metrics.accuracy_all),
        };
        let mut tag_counts = TagCounts::default();
        let mut quality: Option<PseudoLabelQuality> = None;
        for b in &record.batches {
            tag_counts.known += b.tags.known;
            tag_counts.unknown += b.tags.unknown;
            tag_counts.uncertain += b.tags.uncertain;
            if let Some(q) = &b.pseudo_quality {
                quality.get_or_insert_with(Default::default).merge(q);
            }
        }
        Ok(RunSummary {
            scenario: scenario.name.clone(),
            variant: record.header.variant,
            seed: record.header.seed,
            category_shift: shift,
            batches: record.batches.len(),
            samples: metrics.counts.total,
            primary_metric: primary_metric.into(),
            score,
            metrics,
            source_validation_accuracy,
            tag_counts,
            pseudo_quality: quality,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub record: RunRecord,
    pub summary: RunSummary,
}

/// Pre-trains (unless `pretrained` is given) and runs one variant over the
/// scenario's stream for `seed`.
pub fn run_experiment(
    scenario: &ScenarioConfig,
    variant: Variant,
    seed: u64,
    pretrained: Option<&PretrainOutcome>,
) -> Result<Experiment> {
    scenario.validate()?;
    let owned;
    let source = match pretrained {
        Some(p) => p,
        None => {
            owned = pretrain_for_scenario(scenario, seed)?;
            &owned
        }
    };
    let record = match variant {
        Variant::SourceOnly => source_only_baseline(&source.model, scenario, seed)?,
        _ => adapt_stream(source, scenario, variant, seed)?,
    };
    let summary = RunSummary::from_record(&record, source.validation_accuracy)?;
    Ok(Experiment { record, summary })
}
