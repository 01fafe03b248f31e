//! Versioned little-endian binary container for a source model, its
//! pre-training metadata, and an optional prototype bank.
//!
//! ```text
//! magic        8 bytes   "COMETCKP"
//! version      u32       1
//! config       6 × u64   input, hidden, feature, classes, proj hidden, proj out
//! seed         u64       pre-training seed
//! val_acc      f64
//! epochs       u64
//! n_params     u32
//!   name_len   u32, name bytes (UTF-8)
//!   ndim       u32, dims ndim × u64
//!   data       numel × f64
//! has_bank     u8        0 or 1
//!   mode       u8        0 source, 1 running
//!   classes    u64, dim u64
//!   counts     classes × u64
//!   sums       classes × dim × f64
//! ```
//!
//! Decoding rejects trailing bytes. Floats are stored by bit pattern, so a
//! round trip is exact.

use std::path::Path;

use crate::engine::PretrainOutcome;
use crate::error::{Error, Result};
use crate::model::{ComposedModel, NetworkConfig};
use crate::numerics::{ParameterSet, Tensor};
use crate::prototypes::{PrototypeBank, PrototypeMode};
use crate::report::write_atomic;
use crate::scenario::ScenarioConfig;

pub const MAGIC: &[u8; 8] = b"COMETCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ComposedModel,
    /// Seed the source model was pre-trained with.
    pub seed: u64,
    pub validation_accuracy: f64,
    pub epochs_run: usize,
    pub prototypes: Option<PrototypeBank>,
}

impl Checkpoint {
    pub fn from_pretrained(p: PretrainOutcome, seed: u64) -> Self {
        Checkpoint {
            model: p.model,
            seed,
            validation_accuracy: p.validation_accuracy,
            epochs_run: p.epochs_run,
            prototypes: Some(p.prototypes),
        }
    }

    /// Errors unless the stored network is the one `scenario` describes.
    pub fn check_scenario(&self, scenario: &ScenarioConfig) -> Result<()> {
        let want = scenario.network_config();
        if *self.model.config() != want {
            return Err(Error::Checkpoint(format!(
                "checkpoint network {:?} does not match scenario {:?} network {want:?}",
                self.model.config(),
                scenario.name
            )));
        }
        Ok(())
    }
}

impl TryFrom<Checkpoint> for PretrainOutcome {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        let prototypes = c
            .prototypes
            .filter(|b| b.mode() == PrototypeMode::Source)
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no source prototypes".into()))?;
        Ok(PretrainOutcome {
            model: c.model,
            prototypes,
            validation_accuracy: c.validation_accuracy,
            epochs_run: c.epochs_run,
        })
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?)
            .map_err(|_| Error::Checkpoint(format!("{what} does not fit in memory")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    /// Reads `n` f64 values, refusing counts the remaining input cannot hold.
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint(format!("{what} length overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let c = self.model.config();
        for d in [
            c.input_dim,
            c.hidden_dim,
            c.feature_dim,
            c.num_known_classes,
            c.projection_hidden_dim,
            c.projection_dim,
        ] {
            w.u64(d as u64);
        }
        w.u64(self.seed);
        w.f64(self.validation_accuracy);
        w.u64(self.epochs_run as u64);
        let params = self.model.params();
        w.u32(params.len() as u32);
        for (name, t) in params.iter() {
            w.u32(name.len() as u32);
            w.0.extend_from_slice(name.as_bytes());
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            for &v in t.data() {
                w.f64(v);
            }
        }
        match &self.prototypes {
            None => w.u8(0),
            Some(bank) => {
                w.u8(1);
                w.u8(match bank.mode() {
                    PrototypeMode::Source => 0,
                    PrototypeMode::Running => 1,
                });
                w.u64(bank.num_classes() as u64);
                w.u64(bank.feature_dim() as u64);
                for &n in bank.counts() {
                    w.u64(n);
                }
                for row in bank.sums() {
                    for &v in row {
                        w.f64(v);
                    }
                }
            }
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let config = NetworkConfig {
            input_dim: r.usize("input_dim")?,
            hidden_dim: r.usize("hidden_dim")?,
            feature_dim: r.usize("feature_dim")?,
            num_known_classes: r.usize("num_known_classes")?,
            projection_hidden_dim: r.usize("projection_hidden_dim")?,
            projection_dim: r.usize("projection_dim")?,
        };
        let seed = r.u64("seed")?;
        let validation_accuracy = r.f64("validation accuracy")?;
        let epochs_run = r.usize("epoch count")?;

        let n_params = r.u32("parameter count")?;
        let mut params = ParameterSet::new();
        for _ in 0..n_params {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "parameter name")?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32("rank")? as usize;
            let mut shape = Vec::new();
            for _ in 0..ndim {
                shape.push(r.usize("dimension")?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: element count overflows")))?;
            let data = r.f64s(numel, &name)?;
            let tensor =
                Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if params.insert(name.clone(), tensor).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
            }
        }
        let model = ComposedModel::from_parts(config, params)
            .map_err(|e| Error::Checkpoint(format!("parameters do not match the network: {e}")))?;

        let prototypes = match r.u8("prototype flag")? {
            0 => None,
            1 => {
                let mode = match r.u8("prototype mode")? {
                    0 => PrototypeMode::Source,
                    1 => PrototypeMode::Running,
                    m => return Err(Error::Checkpoint(format!("unknown prototype mode {m}"))),
                };
                let classes = r.usize("prototype classes")?;
                let dim = r.usize("prototype width")?;
                if classes != config.num_known_classes || dim != config.feature_dim {
                    return Err(Error::Checkpoint(format!(
                        "prototype bank is {classes}×{dim}, network expects {}×{}",
                        config.num_known_classes, config.feature_dim
                    )));
                }
                let mut counts = Vec::with_capacity(classes.min(bytes.len() / 8));
                for _ in 0..classes {
                    counts.push(r.u64("prototype count")?);
                }
                let flat = r.f64s(
                    classes
                        .checked_mul(dim)
                        .ok_or_else(|| Error::Checkpoint("prototype size overflows".into()))?,
                    "prototype sums",
                )?;
                let sums = flat
                    .chunks(dim.max(1))
                    .map(<[f64]>::to_vec)
                    .collect::<Vec<_>>();
                let sums = if dim == 0 {
                    vec![Vec::new(); classes]
                } else {
                    sums
                };
                Some(
                    PrototypeBank::from_parts(mode, sums, counts)
                        .map_err(|e| Error::Checkpoint(e.to_string()))?,
                )
            }
            f => return Err(Error::Checkpoint(format!("invalid prototype flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model,
            seed,
            validation_accuracy,
            epochs_run,
            prototypes,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
