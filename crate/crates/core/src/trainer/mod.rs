//! Mean-teacher self-training on mixed samples.
//!
//! Each step trains the student on (a) labeled source images and (b) mixed
//! images whose target region is supervised by the EMA teacher's
//! pseudo-labels, then moves the teacher towards the student. The three
//! toggles `use_fdm`, `use_cb` and `use_rcs` switch Fourier alignment,
//! class-balanced pseudo-label weights and rare class sampling on and off.

pub mod checkpoint;
pub mod model;
pub mod run;
pub mod step;
pub mod teacher;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classbalance::{CBConfig, DEFAULT_PRESENCE_THRESHOLD, DEFAULT_RCS_TEMPERATURE};
use crate::error::{Error, Result};

pub use model::{ModelConfig, TinySegModel};
pub use run::{train, MetricsRecord, TrainData, TrainOutcome};
pub use step::{train_step, StepLosses, TrainState};
pub use teacher::{ema_update, teacher_pseudo_label, TeacherState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_alpha: f64,
    pub cb: CBConfig,
    pub rcs_temperature: f64,
    pub rcs_presence_threshold: f64,
    pub use_fdm: bool,
    pub use_cb: bool,
    pub use_rcs: bool,
    pub seed: u64,
    pub eval_interval: usize,
    pub optimizer: OptimizerKind,
    /// Decoupled weight decay, AdamW only.
    pub weight_decay: f64,
    /// Brightness/contrast jitter strength applied to mixed images after mixing.
    pub jitter: f64,
    /// Swap only a centered low-frequency band of this relative size instead of the full spectrum.
    pub fdm_band: Option<f64>,
    /// Score held-out data with the EMA teacher instead of the student.
    pub eval_teacher: bool,
    /// Cap on target-train images used for pseudo-label precision/recall logging.
    pub pseudo_eval_images: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 2,
            learning_rate: 0.2,
            ema_alpha: 0.999,
            cb: CBConfig::default(),
            rcs_temperature: DEFAULT_RCS_TEMPERATURE,
            rcs_presence_threshold: DEFAULT_PRESENCE_THRESHOLD,
            use_fdm: true,
            use_cb: true,
            use_rcs: true,
            seed: 0,
            eval_interval: 50,
            optimizer: OptimizerKind::Sgd,
            weight_decay: 0.01,
            jitter: 0.0,
            fdm_band: None,
            eval_teacher: true,
            pseudo_eval_images: 200,
            model: ModelConfig::default(),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse `{v}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.cb.validate()?;
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return Err(Error::InvalidConfig("ema_alpha must be in [0, 1)".into()));
        }
        if !(self.rcs_temperature > 0.0) {
            return Err(Error::InvalidConfig("rcs_temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rcs_presence_threshold) {
            return Err(Error::InvalidConfig("rcs_presence_threshold must be in [0, 1]".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::InvalidConfig("eval_interval must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::InvalidConfig("jitter must be in [0, 1)".into()));
        }
        if let Some(band) = self.fdm_band {
            if !(0.0..=1.0).contains(&band) {
                return Err(Error::InvalidConfig("fdm_band must be in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// CB settings actually applied: `beta` is neutral when CB is off.
    pub fn effective_cb(&self) -> CBConfig {
        if self.use_cb {
            self.cb.clone()
        } else {
            CBConfig {
                beta: 1.0,
                ..self.cb.clone()
            }
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep their defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key, value)
                .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "iterations" => self.iterations = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "ema_alpha" => self.ema_alpha = parse_num(key, v)?,
            "beta" => self.cb.beta = parse_num(key, v)?,
            "boosted_classes" => {
                self.cb.boosted_classes = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_num(key, s))
                    .collect::<Result<_>>()?
            }
            "confidence_threshold" => self.cb.confidence_threshold = parse_num(key, v)?,
            "per_pixel_confidence" => self.cb.per_pixel_confidence = parse_bool(key, v)?,
            "rcs_temperature" => self.rcs_temperature = parse_num(key, v)?,
            "rcs_presence_threshold" => self.rcs_presence_threshold = parse_num(key, v)?,
            "use_fdm" => self.use_fdm = parse_bool(key, v)?,
            "use_cb" => self.use_cb = parse_bool(key, v)?,
            "use_rcs" => self.use_rcs = parse_bool(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "eval_interval" => self.eval_interval = parse_num(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "adamw" => OptimizerKind::AdamW,
                    _ => return Err(Error::InvalidConfig(format!("unknown optimizer `{v}`"))),
                }
            }
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "jitter" => self.jitter = parse_num(key, v)?,
            "fdm_band" => {
                self.fdm_band = match v {
                    "none" | "" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "eval_teacher" => self.eval_teacher = parse_bool(key, v)?,
            "pseudo_eval_images" => self.pseudo_eval_images = parse_num(key, v)?,
            "hidden" => self.model.hidden = parse_num(key, v)?,
            "kernel" => self.model.kernel = parse_num(key, v)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Inverse of [`TrainConfig::from_kv_str`].
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let classes: Vec<String> = self.cb.boosted_classes.iter().map(u8::to_string).collect();
        let optimizer = match self.optimizer {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdamW => "adamw",
        };
        let band = self
            .fdm_band
            .map(|b| b.to_string())
            .unwrap_or_else(|| "none".into());
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "ema_alpha = {}", self.ema_alpha);
        let _ = writeln!(s, "beta = {}", self.cb.beta);
        let _ = writeln!(s, "boosted_classes = {}", classes.join(","));
        let _ = writeln!(s, "confidence_threshold = {}", self.cb.confidence_threshold);
        let _ = writeln!(s, "per_pixel_confidence = {}", self.cb.per_pixel_confidence);
        let _ = writeln!(s, "rcs_temperature = {}", self.rcs_temperature);
        let _ = writeln!(s, "rcs_presence_threshold = {}", self.rcs_presence_threshold);
        let _ = writeln!(s, "use_fdm = {}", self.use_fdm);
        let _ = writeln!(s, "use_cb = {}", self.use_cb);
        let _ = writeln!(s, "use_rcs = {}", self.use_rcs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "eval_interval = {}", self.eval_interval);
        let _ = writeln!(s, "optimizer = {optimizer}");
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "jitter = {}", self.jitter);
        let _ = writeln!(s, "fdm_band = {band}");
        let _ = writeln!(s, "eval_teacher = {}", self.eval_teacher);
        let _ = writeln!(s, "pseudo_eval_images = {}", self.pseudo_eval_images);
        let _ = writeln!(s, "hidden = {}", self.model.hidden);
        let _ = writeln!(s, "kernel = {}", self.model.kernel);
        s
    }
}
