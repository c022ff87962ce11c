//! Training hyperparameters and the learning-rate schedule.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::kv::KeyValues;
use crate::loss::LossWeights;
use crate::model::ModelConfig;

/// Model geometry preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Preset {
    /// p=8, D=64, 4 layers, D̂=32.
    #[default]
    Toy,
    /// ViT-Base geometry, p=16, D̂=256.
    Paper,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Toy => "toy",
            Preset::Paper => "paper",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            o => Err(Error::Config(format!("unknown preset `{o}` (expected toy|paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: FusionMode,
    pub preset: Preset,
    pub lr0: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub loss: LossWeights,
    /// Save a checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    /// Desk-scale run: toy model on 48×48 scenes for 30 epochs.
    fn default() -> Self {
        TrainConfig {
            mode: FusionMode::RcdptReassemble,
            preset: Preset::Toy,
            lr0: 1e-4,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 4,
            epochs: 30,
            seed: 0,
            height: 48,
            width: 48,
            loss: LossWeights::default(),
            checkpoint_every: 10,
        }
    }
}

/// Keys accepted in config files, in the order they are written.
pub const CONFIG_KEYS: [&str; 14] = [
    "mode",
    "preset",
    "lr0",
    "lr_power",
    "momentum",
    "weight_decay",
    "batch_size",
    "epochs",
    "seed",
    "height",
    "width",
    "w_l1",
    "w_smooth",
    "checkpoint_every",
];

impl TrainConfig {
    /// Full-scale schedule on 384×384 inputs.
    pub fn paper() -> Self {
        TrainConfig {
            preset: Preset::Paper,
            epochs: 60,
            height: 384,
            width: 384,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr0", self.lr0),
            ("lr_power", self.lr_power),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ];
        if let Some((k, v)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("{k} must be positive, got {v}")));
        }
        if self.momentum >= 1.0 {
            return Err(Error::Config(format!("momentum must be below 1, got {}", self.momentum)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.loss.l1 < 0.0 || self.loss.smooth < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let base = match self.preset {
            Preset::Toy => ModelConfig::toy(self.mode),
            Preset::Paper => ModelConfig::paper(self.mode),
        };
        base.with_input(self.height, self.width)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("mode", self.mode)
            .set("preset", self.preset)
            .set("lr0", self.lr0)
            .set("lr_power", self.lr_power)
            .set("momentum", self.momentum)
            .set("weight_decay", self.weight_decay)
            .set("batch_size", self.batch_size)
            .set("epochs", self.epochs)
            .set("seed", self.seed)
            .set("height", self.height)
            .set("width", self.width)
            .set("w_l1", self.loss.l1)
            .set("w_smooth", self.loss.smooth)
            .set("checkpoint_every", self.checkpoint_every);
        kv
    }

    /// Overrides every field whose key is present; unknown keys are errors.
    pub fn merge(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(k) = kv.keys().find(|k| !CONFIG_KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.parse_opt($key)? {
                    $field = v;
                }
            };
        }
        if let Some(m) = kv.get("mode") {
            self.mode = m.parse()?;
        }
        if let Some(p) = kv.get("preset") {
            self.preset = p.parse()?;
        }
        take!("lr0", self.lr0);
        take!("lr_power", self.lr_power);
        take!("momentum", self.momentum);
        take!("weight_decay", self.weight_decay);
        take!("batch_size", self.batch_size);
        take!("epochs", self.epochs);
        take!("seed", self.seed);
        take!("height", self.height);
        take!("width", self.width);
        take!("w_l1", self.loss.l1);
        take!("w_smooth", self.loss.smooth);
        take!("checkpoint_every", self.checkpoint_every);
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.merge(&KeyValues::read(path)?)?;
        Ok(c)
    }
}

/// `lr0 · (1 − step/max_steps)^power`.
pub fn lr_schedule(step: usize, max_steps: usize, lr0: f64, power: f64) -> Result<f64> {
    if max_steps == 0 {
        return Err(Error::arg("lr_schedule", "max_steps must be positive"));
    }
    if step > max_steps {
        return Err(Error::arg("lr_schedule", format!("step {step} beyond max_steps {max_steps}")));
    }
    Ok(lr0 * (1.0 - step as f64 / max_steps as f64).powf(power))
}
