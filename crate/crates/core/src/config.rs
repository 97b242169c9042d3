//! Training configuration, profiles and dotted-key overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::contrast::ContrastConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::LossWeights;
use crate::sdb::{EtaDistribution, DEFAULT_EPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr * (1 - t / iterations)^power`.
    Poly { power: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalModel {
    #[default]
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdbConfig {
    pub eps: f64,
    pub eta: EtaDistribution,
}

impl Default for SdbConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            eta: EtaDistribution::Uniform,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub iterations: u64,
    /// Split evenly between labeled and unlabeled samples.
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// EMA decay of the teacher.
    pub ema_decay: f64,
    pub bank_size: usize,
    pub loss: LossWeights,
    pub contrast: ContrastConfig,
    pub sdb: SdbConfig,
    pub augment: AugmentConfig,
    /// `init_seed` is replaced by `seed` when training.
    pub model: ModelConfig,
    pub sdb_on: bool,
    /// Weak-to-strong pixel consistency of the base Mean Teacher.
    pub con_on: bool,
    pub ctr_on: bool,
    /// Off means a bank of size one.
    pub bank_on: bool,
    pub ctr_w_on: bool,
    pub ctr_s_on: bool,
    pub pixel_s2w_on: bool,
    pub dice_background: bool,
    pub seed: u64,
    pub precision: Precision,
    /// Evaluate every this many iterations (0: only at the end).
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub eval_model: EvalModel,
    pub symmetric_asd: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            iterations: 2000,
            batch_size: 8,
            lr: 0.01,
            lr_schedule: LrSchedule::Constant,
            momentum: 0.9,
            weight_decay: 1e-4,
            ema_decay: 0.99,
            bank_size: 128,
            loss: LossWeights::default(),
            contrast: ContrastConfig::default(),
            sdb: SdbConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            sdb_on: true,
            con_on: true,
            ctr_on: true,
            bank_on: true,
            ctr_w_on: true,
            ctr_s_on: true,
            pixel_s2w_on: false,
            dice_background: true,
            seed: 0,
            precision: Precision::F64,
            eval_every: 0,
            checkpoint_every: 500,
            eval_model: EvalModel::Teacher,
            symmetric_asd: false,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 30k iterations, batch 24, 256x256 inputs.
    pub fn paper() -> Self {
        Self {
            iterations: 30_000,
            batch_size: 24,
            checkpoint_every: 5_000,
            model: ModelConfig {
                height: 256,
                width: 256,
                ..ModelConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown profile `{name}`"))),
        }
    }

    /// Parses JSON; an optional top-level `"profile"` picks the base values
    /// that the remaining keys override.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text)?;
        let base = match value.as_object_mut().and_then(|o| o.remove("profile")) {
            Some(Value::String(p)) => Self::profile(&p)?,
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
            None => Self::default(),
        };
        let mut merged = serde_json::to_value(base)?;
        merge(&mut merged, value);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `key = value` where `key` may be dotted (`contrast.tau`).
    pub fn with_override(&self, key: &str, value: &Value) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        let mut slot = &mut v;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = value.clone();
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return bad(format!("batch_size must be even and positive, got {}", self.batch_size));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return bad("need lr > 0, weight_decay >= 0 and momentum in [0, 1)".into());
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema_decay must lie in (0, 1), got {}", self.ema_decay));
        }
        if self.bank_size == 0 {
            return bad("bank_size must be at least 1".into());
        }
        if !(self.sdb.eps > 0.0) {
            return bad("sdb.eps must be positive".into());
        }
        if let LrSchedule::Poly { power } = self.lr_schedule {
            if !(power >= 0.0) {
                return bad("poly power must be nonnegative".into());
            }
        }
        self.loss.validate()?;
        self.contrast.validate()?;
        self.sdb.eta.validate()?;
        self.augment.validate()?;
        self.model.validate()
    }

    pub fn effective_bank_size(&self) -> usize {
        if self.bank_on {
            self.bank_size
        } else {
            1
        }
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Poly { power } => {
                let frac = 1.0 - t as f64 / self.iterations.max(1) as f64;
                self.lr * frac.max(0.0).powf(power)
            }
        }
    }

    pub fn first_dice_class(&self) -> usize {
        usize::from(!self.dice_background)
    }

    /// Digest of everything that shapes a run, excluding output locations
    /// and reporting cadence.
    pub fn digest(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.data_root = PathBuf::new();
        c.eval_every = 0;
        c.checkpoint_every = 0;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).into()
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}
