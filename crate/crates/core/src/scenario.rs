//! Experiment description: class split, domain shift, stream shape, network
//! widths, and hyperparameters. Loaded from TOML; every key has a default and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NetworkConfig;

/// Which category shift a split describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategoryShift {
    /// No private classes on either side.
    Closed,
    /// Target classes are a strict subset of the source classes.
    Pda,
    /// Source classes are a strict subset of the target classes.
    Oda,
    /// Private classes on both sides.
    Opda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSplit {
    pub shared: usize,
    pub source_private: usize,
    pub target_private: usize,
}

impl Default for ClassSplit {
    fn default() -> Self {
        ClassSplit {
            shared: 6,
            source_private: 3,
            target_private: 3,
        }
    }
}

impl ClassSplit {
    pub fn num_known(&self) -> usize {
        self.shared + self.source_private
    }

    /// Classes that exist anywhere (source or target).
    pub fn num_total(&self) -> usize {
        self.shared + self.source_private + self.target_private
    }

    pub fn category_shift(&self) -> CategoryShift {
        match (self.source_private > 0, self.target_private > 0) {
            (false, false) => CategoryShift::Closed,
            (true, false) => CategoryShift::Pda,
            (false, true) => CategoryShift::Oda,
            (true, true) => CategoryShift::Opda,
        }
    }

    /// Generator class ids present in the target domain: the shared source
    /// classes `0..shared` followed by the target-private ids, which are
    /// numbered after all source classes.
    pub fn target_classes(&self) -> Vec<usize> {
        (0..self.shared)
            .chain(self.num_known()..self.num_total())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub input_dim: usize,
    /// Per-coordinate standard deviation of every class-conditional Gaussian.
    pub sigma: f64,
    /// Pairwise distance between class means.
    pub separation: f64,
    /// Total number of labeled source samples, spread evenly over source classes.
    pub source_samples: usize,
    /// Fraction of source samples held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            input_dim: 2,
            sigma: 1.0,
            separation: 4.0,
            source_samples: 1800,
            validation_fraction: 0.2,
        }
    }
}

/// Affine shift applied to target samples: `scale · R(x) + t`, then extra
/// Gaussian noise. Lengths are in units of `data.sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainTransform {
    /// Rotation applied in each coordinate plane (0,1), (2,3), ...
    pub rotation_deg: f64,
    /// Length of the translation along the unit diagonal.
    pub translation: f64,
    /// Per-axis scale; a single value is broadcast to every axis.
    pub scale: Vec<f64>,
    /// Standard deviation of extra noise added after the affine map.
    pub noise: f64,
}

impl Default for DomainTransform {
    fn default() -> Self {
        DomainTransform {
            rotation_deg: 30.0,
            translation: 1.0,
            scale: vec![1.2],
            noise: 0.0,
        }
    }
}

impl DomainTransform {
    pub fn identity() -> Self {
        DomainTransform {
            rotation_deg: 0.0,
            translation: 0.0,
            scale: vec![1.0],
            noise: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0
            && self.translation == 0.0
            && self.noise == 0.0
            && self.scale.iter().all(|&s| s == 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub batch_size: usize,
    pub num_batches: usize,
    /// Augmentation jitter; defaults to a tenth of `data.sigma`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment_sigma: Option<f64>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            batch_size: 128,
            num_batches: 100,
            augment_sigma: None,
        }
    }
}

impl StreamConfig {
    pub fn num_samples(&self) -> usize {
        self.batch_size * self.num_batches
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkWidths {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub projection_hidden_dim: usize,
    pub projection_dim: usize,
}

impl Default for NetworkWidths {
    fn default() -> Self {
        NetworkWidths {
            hidden_dim: 64,
            feature_dim: 32,
            projection_hidden_dim: 32,
            projection_dim: 16,
        }
    }
}

/// Where running (source-free) prototypes take their features from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeFeatures {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// EMA momentum of the teacher.
    pub alpha: f64,
    /// Pseudo-label entropy thresholds.
    pub delta_l: f64,
    pub delta_u: f64,
    /// Inference rejection threshold.
    pub delta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Weight of the entropy loss.
    pub lambda: f64,
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    pub use_contrastive: bool,
    pub use_entropy: bool,
    pub prototype_features: PrototypeFeatures,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha: 0.999,
            delta_l: 0.25,
            delta_u: 0.75,
            delta: 0.5,
            tau: 0.1,
            lambda: 0.1,
            learning_rate: 1e-4,
            sgd_momentum: 0.9,
            use_contrastive: true,
            use_entropy: true,
            prototype_features: PrototypeFeatures::Teacher,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("alpha", self.alpha),
            ("delta_l", self.delta_l),
            ("delta_u", self.delta_u),
            ("delta", self.delta),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {v}")));
            }
        }
        if self.delta_l >= self.delta_u {
            return Err(Error::Config(format!(
                "delta_l must be below delta_u, got {} >= {}",
                self.delta_l, self.delta_u
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::Config(format!(
                "sgd_momentum must be in [0,1), got {}",
                self.sgd_momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            max_epochs: 60,
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 32,
            patience: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub split: ClassSplit,
    pub data: DataConfig,
    pub shift: DomainTransform,
    pub stream: StreamConfig,
    pub network: NetworkWidths,
    pub hyper: HyperParams,
    pub pretrain: PretrainConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "scenario".into(),
            seed: 1,
            split: ClassSplit::default(),
            data: DataConfig::default(),
            shift: DomainTransform::default(),
            stream: StreamConfig::default(),
            network: NetworkWidths::default(),
            hyper: HyperParams::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.split.num_known() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 source classes, got {}",
                self.split.num_known()
            )));
        }
        if self.split.target_classes().is_empty() {
            return Err(Error::Config("target label space is empty".into()));
        }
        let d = &self.data;
        if d.input_dim == 0 {
            return Err(Error::Config("data.input_dim must be at least 1".into()));
        }
        if !(d.sigma > 0.0 && d.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "data.sigma must be positive, got {}",
                d.sigma
            )));
        }
        if !(d.separation > 0.0 && d.separation.is_finite()) {
            return Err(Error::Config(format!(
                "data.separation must be positive, got {}",
                d.separation
            )));
        }
        if d.source_samples < self.split.num_known() {
            return Err(Error::Config(
                "data.source_samples must cover every source class".into(),
            ));
        }
        if !(0.0..1.0).contains(&d.validation_fraction) {
            return Err(Error::Config(
                "data.validation_fraction must be in [0,1)".into(),
            ));
        }
        let s = &self.shift;
        if s.scale.is_empty() || s.scale.iter().any(|&v| v == 0.0 || !v.is_finite()) {
            return Err(Error::Config(
                "shift.scale entries must be finite and nonzero".into(),
            ));
        }
        if s.scale.len() != 1 && s.scale.len() != d.input_dim {
            return Err(Error::Config(format!(
                "shift.scale must have 1 or {} entries, got {}",
                d.input_dim,
                s.scale.len()
            )));
        }
        if !(s.noise >= 0.0 && s.noise.is_finite()) {
            return Err(Error::Config("shift.noise must be non-negative".into()));
        }
        if !s.rotation_deg.is_finite() || !s.translation.is_finite() {
            return Err(Error::Config("shift values must be finite".into()));
        }
        if self.stream.batch_size == 0 || self.stream.num_batches == 0 {
            return Err(Error::Config(
                "stream.batch_size and stream.num_batches must be positive".into(),
            ));
        }
        if let Some(a) = self.stream.augment_sigma {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Config(
                    "stream.augment_sigma must be non-negative".into(),
                ));
            }
        }
        self.network_config().validate()?;
        self.hyper.validate()?;
        let p = &self.pretrain;
        if p.batch_size == 0
            || p.learning_rate.is_nan()
            || p.learning_rate <= 0.0
            || !(0.0..1.0).contains(&p.momentum)
        {
            return Err(Error::Config("pretrain settings out of range".into()));
        }
        Ok(())
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            input_dim: self.data.input_dim,
            hidden_dim: self.network.hidden_dim,
            feature_dim: self.network.feature_dim,
            num_known_classes: self.split.num_known(),
            projection_hidden_dim: self.network.projection_hidden_dim,
            projection_dim: self.network.projection_dim,
        }
    }

    pub fn augment_sigma(&self) -> f64 {
        self.stream.augment_sigma.unwrap_or(0.1 * self.data.sigma)
    }

    /// Parses and validates a scenario document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let scenario: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::ScenarioParse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }
}

/// Source of the shipped reference open-partial scenario.
pub const REFERENCE_OPDA: &str = include_str!("../../../scenarios/ref_opda.toml");

/// Scenarios that can be named instead of given as a path.
pub fn builtin_scenario(name: &str) -> Option<Result<ScenarioConfig>> {
    match name {
        "ref_opda" => Some(ScenarioConfig::from_toml_str(REFERENCE_OPDA)),
        _ => None,
    }
}

/// Reads, parses and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ScenarioConfig::from_toml_str(&text).map_err(|e| match e {
        Error::ScenarioParse(msg) => Error::ScenarioParse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_fills_defaults() {
        let s = ScenarioConfig::from_toml_str(
            "seed = 7\n[split]\nshared = 6\nsource_private = 6\ntarget_private = 0\n",
        )
        .unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.split.category_shift(), CategoryShift::Pda);
        assert_eq!(s.hyper, HyperParams::default());
        assert_eq!(s.hyper.alpha, 0.999);
        assert_eq!(s.hyper.delta_l, 0.25);
        assert_eq!(s.hyper.delta_u, 0.75);
        assert_eq!(s.hyper.delta, 0.5);
        assert_eq!(s.hyper.tau, 0.1);
        assert_eq!(s.hyper.sgd_momentum, 0.9);
        assert_eq!(s.stream.batch_size, 128);
    }

    #[test]
    fn inverted_thresholds_rejected() {
        let err =
            ScenarioConfig::from_toml_str("[hyper]\ndelta_l = 0.8\ndelta_u = 0.2\n").unwrap_err();
        assert!(err.to_string().contains("delta_l"), "{err}");
    }

    #[test]
    fn unknown_key_rejected_with_context() {
        let err = ScenarioConfig::from_toml_str("[hyper]\nalpah = 0.9\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("alpah"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn split_categories() {
        let mk = |a, b, c| ClassSplit {
            shared: a,
            source_private: b,
            target_private: c,
        };
        assert_eq!(mk(6, 3, 3).category_shift(), CategoryShift::Opda);
        assert_eq!(mk(6, 0, 3).category_shift(), CategoryShift::Oda);
        assert_eq!(mk(6, 6, 0).category_shift(), CategoryShift::Pda);
        assert_eq!(
            mk(6, 3, 3).target_classes(),
            vec![0, 1, 2, 3, 4, 5, 9, 10, 11]
        );
    }

    #[test]
    fn toml_round_trip() {
        let s = ScenarioConfig::default();
        let back = ScenarioConfig::from_toml_str(&s.to_toml_string()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn single_source_class_rejected() {
        let r = ScenarioConfig::from_toml_str(
            "[split]\nshared = 1\nsource_private = 0\ntarget_private = 2\n",
        );
        assert!(r.is_err());
    }

    #[test]
    fn shipped_reference_scenario() {
        let s = builtin_scenario("ref_opda").unwrap().unwrap();
        assert_eq!(
            (
                s.split.shared,
                s.split.source_private,
                s.split.target_private
            ),
            (6, 3, 3)
        );
        assert_eq!(s.split.category_shift(), CategoryShift::Opda);
        assert_eq!(s.shift.rotation_deg, 30.0);
        assert_eq!(s.stream.batch_size, 128);
        assert!(s.stream.num_batches >= 100);
        assert!(builtin_scenario("nope").is_none());
    }
}
