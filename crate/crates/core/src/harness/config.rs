//! `key=value` run configuration.

use super::HarnessError;
use crate::model::ModelConfig;
use crate::training::{CurriculumSchedule, TrainConfig};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Curriculum training of fixed-length models.
    Ram,
    /// Fine-tuning a trained fixed-length model with learned stopping.
    Dtram,
}

impl std::str::FromStr for RunMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ram" => Ok(RunMode::Ram),
            "dtram" => Ok(RunMode::Dtram),
            other => Err(HarnessError::Usage(format!("mode must be ram or dtram, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunMode::Ram => "ram",
            RunMode::Dtram => "dtram",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub mode: RunMode,
    pub glimpse_size: usize,
    pub hidden_dim: usize,
    pub location_sigma: f64,
    pub curriculum: CurriculumSchedule,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub samples_per_image: usize,
    pub baseline: bool,
    pub intermediate_supervision: bool,
    pub location_lr_scale: f64,
    pub finetune_epochs: usize,
    pub init_checkpoint: Option<PathBuf>,
    pub validation_size: usize,
    /// Use only the first N training images (0 = all).
    pub train_limit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("runs/default"),
            seed: 1,
            mode: RunMode::Ram,
            glimpse_size: 8,
            hidden_dim: 256,
            location_sigma: 0.3,
            curriculum: CurriculumSchedule::new(vec![(1, 10), (3, 20), (5, 20), (7, 30)])
                .expect("valid default schedule"),
            lr: 0.01,
            momentum: 0.9,
            lr_decay: 0.3,
            lr_decay_every: 30,
            batch_size: 20,
            gamma: 0.99,
            samples_per_image: 1,
            baseline: true,
            intermediate_supervision: true,
            location_lr_scale: 0.01,
            finetune_epochs: 10,
            init_checkpoint: None,
            validation_size: 5000,
            train_limit: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value
        .parse()
        .map_err(|_| HarnessError::Usage(format!("bad value for {key}: {value:?}")))
}

impl RunConfig {
    /// Parses config text on top of the defaults. Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Usage(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "mode" => self.mode = value.parse()?,
            "glimpse_size" => self.glimpse_size = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "location_sigma" => self.location_sigma = parse(key, value)?,
            "curriculum" => {
                self.curriculum =
                    CurriculumSchedule::parse(value).map_err(|e| HarnessError::Usage(e.to_string()))?
            }
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "lr_decay_every" => self.lr_decay_every = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "samples_per_image" => self.samples_per_image = parse(key, value)?,
            "baseline" => self.baseline = parse(key, value)?,
            "intermediate_supervision" => self.intermediate_supervision = parse(key, value)?,
            "location_lr_scale" => self.location_lr_scale = parse(key, value)?,
            "finetune_epochs" => self.finetune_epochs = parse(key, value)?,
            "init_checkpoint" => {
                self.init_checkpoint = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            "validation_size" => self.validation_size = parse(key, value)?,
            "train_limit" => self.train_limit = parse(key, value)?,
            other => return Err(HarnessError::Usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// The fully resolved configuration, in the same format `parse` reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        put("data_dir", self.data_dir.display().to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("seed", self.seed.to_string());
        put("mode", self.mode.to_string());
        put("glimpse_size", self.glimpse_size.to_string());
        put("hidden_dim", self.hidden_dim.to_string());
        put("location_sigma", self.location_sigma.to_string());
        put("curriculum", self.curriculum.to_text());
        put("lr", self.lr.to_string());
        put("momentum", self.momentum.to_string());
        put("lr_decay", self.lr_decay.to_string());
        put("lr_decay_every", self.lr_decay_every.to_string());
        put("batch_size", self.batch_size.to_string());
        put("gamma", self.gamma.to_string());
        put("samples_per_image", self.samples_per_image.to_string());
        put("baseline", self.baseline.to_string());
        put("intermediate_supervision", self.intermediate_supervision.to_string());
        put("location_lr_scale", self.location_lr_scale.to_string());
        put("finetune_epochs", self.finetune_epochs.to_string());
        put(
            "init_checkpoint",
            self.init_checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        put("validation_size", self.validation_size.to_string());
        put("train_limit", self.train_limit.to_string());
        s
    }

    /// Model config for the last curriculum stage.
    pub fn model_config(&self) -> ModelConfig {
        let max_steps = self.curriculum.stages().last().map_or(1, |s| s.0);
        ModelConfig {
            glimpse_size: self.glimpse_size,
            hidden_dim: self.hidden_dim,
            num_classes: crate::data::NUM_CLASSES,
            max_steps,
            location_sigma: self.location_sigma,
            dynamic: self.mode == RunMode::Dtram,
        }
    }

    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            lr_decay: self.lr_decay,
            lr_decay_every: self.lr_decay_every,
            batch_size: self.batch_size,
            gamma: self.gamma,
            samples_per_image: self.samples_per_image,
            epochs,
            baseline_enabled: self.baseline,
            intermediate_supervision: self.intermediate_supervision,
            location_lr_scale: self.location_lr_scale,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model_config()
            .validate()
            .map_err(|e| HarnessError::Usage(e.to_string()))?;
        self.train_config(self.finetune_epochs)
            .validate()
            .map_err(|e| HarnessError::Usage(e.to_string()))?;
        if self.mode == RunMode::Dtram && self.init_checkpoint.is_none() {
            return Err(HarnessError::Usage(
                "mode=dtram fine-tunes a trained fixed-length model; set init_checkpoint".into(),
            ));
        }
        Ok(())
    }
}
