//! Command implementations behind the `dtram` binary.

pub mod config;
pub mod verify;

pub use config::{RunConfig, RunMode};

use crate::data::{self, DataError, LabeledDataset};
use crate::glimpse::location_to_pixel;
use crate::model::checkpoint::{self, CheckpointError};
use crate::model::{run_greedy, ModelConfig, Mode, RamParams, StopAction};
use crate::training::{
    evaluate, evaluate_threshold, finetune_dtram, train_ram_curriculum, EpochReport, StageResult,
    TrainingError,
};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Data(_) => 2,
            HarnessError::Numerical(_) => 3,
        }
    }
}

impl From<DataError> for HarnessError {
    fn from(e: DataError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl From<CheckpointError> for HarnessError {
    fn from(e: CheckpointError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl From<TrainingError> for HarnessError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::InvalidConfig(m) => HarnessError::Usage(m),
            e @ TrainingError::NonFinite { .. } => HarnessError::Numerical(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Data(format!("{}: {e}", path.display()))
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(HarnessError::Usage(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// Loads one split. Validation is the last `validation_size` training images;
/// train is what remains.
pub fn load_split(data_dir: &Path, split: Split, validation_size: usize) -> Result<LabeledDataset> {
    Ok(match split {
        Split::Test => data::load_mnist_test(data_dir)?,
        Split::Train => data::load_mnist_train(data_dir)?.split_tail(validation_size).0,
        Split::Validation => data::load_mnist_train(data_dir)?.split_tail(validation_size).1,
    })
}

pub const METRICS_HEADER: [&str; 7] = [
    "epoch",
    "split",
    "loss",
    "reward_mean",
    "steps_mean",
    "accuracy",
    "wallclock_s",
];

struct MetricsWriter {
    writer: csv::Writer<std::fs::File>,
    gamma: f64,
}

impl MetricsWriter {
    fn create(path: &Path, gamma: f64) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| HarnessError::Data(e.to_string()))?;
        writer
            .write_record(METRICS_HEADER)
            .map_err(|e| HarnessError::Data(e.to_string()))?;
        Ok(Self { writer, gamma })
    }

    fn write(&mut self, r: &EpochReport) -> std::result::Result<(), csv::Error> {
        let t = &r.train;
        self.writer.write_record([
            r.epoch.to_string(),
            "train".into(),
            t.loss.to_string(),
            t.reward_mean.to_string(),
            t.steps_mean.to_string(),
            t.accuracy.to_string(),
            format!("{:.3}", t.wallclock_s),
        ])?;
        if let Some(v) = &r.validation {
            self.writer.write_record([
                r.epoch.to_string(),
                "validation".into(),
                v.loss.to_string(),
                v.reward_mean(self.gamma).to_string(),
                v.avg_steps().to_string(),
                v.accuracy().to_string(),
                format!("{:.3}", t.wallclock_s),
            ])?;
        }
        self.writer.flush()?;
        Ok(())
    }
}

/// Files produced by `train`.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Vec<PathBuf>,
    pub resolved_config: PathBuf,
}

pub fn stage_checkpoint_name(steps: usize) -> String {
    format!("stage_T{steps}.ckpt")
}

pub const DTRAM_CHECKPOINT: &str = "dtram.ckpt";

/// Trains according to `cfg`, writing checkpoints, per-epoch metrics and the
/// resolved config into `cfg.out_dir`. Progress lines go to `log`.
pub fn cmd_train(cfg: &RunConfig, log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let resolved = cfg.out_dir.join("config.resolved");
    std::fs::write(&resolved, cfg.to_text()).map_err(io_err(&resolved))?;

    let (mut train_set, validation) = data::load_mnist_train(&cfg.data_dir)?.split_tail(cfg.validation_size);
    if cfg.train_limit > 0 {
        train_set.truncate(cfg.train_limit);
    }
    let validation = (!validation.is_empty()).then_some(validation);
    let _ = writeln!(
        log,
        "train: {} images, validation: {}",
        train_set.len(),
        validation.as_ref().map_or(0, |v| v.len())
    );

    let mut outcome = TrainOutcome {
        checkpoints: vec![],
        metrics: vec![],
        resolved_config: resolved,
    };
    let model = cfg.model_config();
    let mut write_error: Option<csv::Error> = None;

    match cfg.mode {
        RunMode::Ram => {
            let train = cfg.train_config(0);
            let mut writers: Vec<(usize, MetricsWriter)> = Vec::new();
            for &(steps, _) in cfg.curriculum.stages() {
                let path = cfg.out_dir.join(format!("metrics_T{steps}.csv"));
                writers.push((steps, MetricsWriter::create(&path, cfg.gamma)?));
                outcome.metrics.push(path);
            }
            let mut observer = |r: &EpochReport| {
                log_epoch(log, r);
                if let Some((_, w)) = writers.iter_mut().find(|(s, _)| *s == r.stage_steps) {
                    if let Err(e) = w.write(r) {
                        write_error.get_or_insert(e);
                    }
                }
            };
            let mut save_error: Option<CheckpointError> = None;
            let mut on_stage = |stage: &StageResult| {
                let path = cfg.out_dir.join(stage_checkpoint_name(stage.steps));
                match checkpoint::save(&path, &stage.params, &stage.config) {
                    Ok(()) => outcome.checkpoints.push(path),
                    Err(e) => {
                        save_error.get_or_insert(e);
                    }
                }
            };
            train_ram_curriculum(
                &train_set,
                validation.as_ref(),
                &cfg.curriculum,
                &model,
                &train,
                &mut observer,
                &mut on_stage,
            )?;
            if let Some(e) = save_error {
                return Err(e.into());
            }
        }
        RunMode::Dtram => {
            let init = cfg.init_checkpoint.as_ref().expect("validated");
            let (ram_params, ram_config) = checkpoint::load(init)?;
            let model = ModelConfig {
                dynamic: true,
                ..ram_config
            };
            if model.glimpse_size != cfg.glimpse_size || model.hidden_dim != cfg.hidden_dim {
                return Err(HarnessError::Data(format!(
                    "{} does not match the configured glimpse_size/hidden_dim",
                    init.display()
                )));
            }
            let model = ModelConfig {
                location_sigma: cfg.location_sigma,
                ..model
            };
            let train = cfg.train_config(cfg.finetune_epochs);
            let path = cfg.out_dir.join("metrics.csv");
            let mut writer = MetricsWriter::create(&path, cfg.gamma)?;
            outcome.metrics.push(path);
            let mut observer = |r: &EpochReport| {
                log_epoch(log, r);
                if let Err(e) = writer.write(r) {
                    write_error.get_or_insert(e);
                }
            };
            let params = finetune_dtram(&ram_params, &train_set, validation.as_ref(), &model, &train, &mut observer)?;
            let path = cfg.out_dir.join(DTRAM_CHECKPOINT);
            checkpoint::save(&path, &params, &model)?;
            outcome.checkpoints.push(path);
        }
    }
    if let Some(e) = write_error {
        return Err(HarnessError::Data(format!("writing metrics: {e}")));
    }
    Ok(outcome)
}

fn log_epoch(log: &mut dyn Write, r: &EpochReport) {
    let t = &r.train;
    let val = r
        .validation
        .as_ref()
        .map(|v| format!(" | val err {:.2}% steps {:.2}", v.error_pct(), v.avg_steps()))
        .unwrap_or_default();
    let _ = writeln!(
        log,
        "T={} epoch {:>3}: loss {:.4} reward {:.4} steps {:.2} acc {:.4} ({:.1}s){val}",
        r.stage_steps, r.epoch, t.loss, t.reward_mean, t.steps_mean, t.accuracy, t.wallclock_s
    );
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub checkpoint: String,
    pub split: String,
    pub policy: String,
    pub count: usize,
    pub error_pct: f64,
    pub avg_steps: f64,
    pub histogram: Vec<usize>,
    pub correct_histogram: Vec<usize>,
}

fn check_labels(dataset: &LabeledDataset, config: &ModelConfig) -> Result<()> {
    if let Some(&l) = dataset.labels.iter().find(|&&l| l >= config.num_classes) {
        return Err(HarnessError::Data(format!(
            "label {l} does not fit a {}-class checkpoint",
            config.num_classes
        )));
    }
    Ok(())
}

pub fn cmd_eval(
    checkpoint_path: &Path,
    dataset: &LabeledDataset,
    split: Split,
    mode: Mode,
    seed: u64,
) -> Result<EvalOutput> {
    let (params, config) = checkpoint::load(checkpoint_path)?;
    check_labels(dataset, &config)?;
    let report = evaluate(dataset, &params, &config, mode, seed);
    Ok(EvalOutput {
        checkpoint: checkpoint_path.display().to_string(),
        split: split.to_string(),
        policy: match mode {
            Mode::Greedy => "greedy".into(),
            Mode::Sample => "sample".into(),
        },
        count: report.count,
        error_pct: report.error_pct(),
        avg_steps: report.avg_steps(),
        histogram: report.histogram,
        correct_histogram: report.correct_histogram,
    })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub avg_steps: f64,
    pub accuracy: f64,
    pub error_pct: f64,
}

pub const DEFAULT_THRESHOLDS: [f64; 9] = [0.0, 0.5, 0.8, 0.9, 0.95, 0.99, 0.999, 0.9999, 1.0];

/// Confidence-threshold stopping on a fixed-length checkpoint, rows sorted by threshold.
pub fn cmd_sweep_threshold(
    checkpoint_path: &Path,
    thresholds: &[f64],
    dataset: &LabeledDataset,
) -> Result<Vec<SweepRow>> {
    let (params, config) = checkpoint::load(checkpoint_path)?;
    check_labels(dataset, &config)?;
    let config = ModelConfig {
        dynamic: false,
        ..config
    };
    let mut sorted = thresholds.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sweep_rows(&params, &config, &sorted, dataset))
}

pub fn sweep_rows(params: &RamParams, config: &ModelConfig, thresholds: &[f64], dataset: &LabeledDataset) -> Vec<SweepRow> {
    thresholds
        .iter()
        .map(|&threshold| {
            let r = evaluate_threshold(dataset, params, config, threshold);
            SweepRow {
                threshold,
                avg_steps: r.avg_steps(),
                accuracy: r.accuracy(),
                error_pct: r.error_pct(),
            }
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_data = |e: csv::Error| HarnessError::Data(e.to_string());
    w.write_record(["threshold", "avg_steps", "accuracy", "error_pct"])
        .map_err(to_data)?;
    for r in rows {
        w.write_record([
            r.threshold.to_string(),
            r.avg_steps.to_string(),
            r.accuracy.to_string(),
            r.error_pct.to_string(),
        ])
        .map_err(to_data)?;
    }
    w.flush().map_err(|e| HarnessError::Data(e.to_string()))
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<verify::Check>,
    pub passed: bool,
}

pub fn cmd_verify() -> VerifyReport {
    let checks = verify::run_all();
    let passed = checks.iter().all(|c| c.passed);
    VerifyReport { checks, passed }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceStep {
    pub step: usize,
    /// Normalized `(y, x)` of the glimpse taken at this step.
    pub location: [f64; 2],
    /// Continuous pixel `(row, col)` of the glimpse center.
    pub pixel: [f64; 2],
    pub stop_prob: Option<f64>,
    pub action: String,
    pub top3: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceOutput {
    pub index: usize,
    pub label: usize,
    pub prediction: usize,
    pub stop_time: usize,
    pub steps: Vec<TraceStep>,
}

/// Greedy trajectory of one image.
pub fn cmd_trace(checkpoint_path: &Path, dataset: &LabeledDataset, index: usize) -> Result<TraceOutput> {
    if index >= dataset.len() {
        return Err(HarnessError::Usage(format!(
            "image index {index} out of range for {} images",
            dataset.len()
        )));
    }
    let (params, config) = checkpoint::load(checkpoint_path)?;
    let image = &dataset.images[index];
    let traj = run_greedy(image, &params, &config);
    let steps = traj
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (row, col) = location_to_pixel(s.observed_at, image.height(), image.width());
            let mut ranked: Vec<(usize, f64)> = s.class_probs.data().iter().copied().enumerate().collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
            ranked.truncate(3);
            TraceStep {
                step: i + 1,
                location: s.observed_at.to_array(),
                pixel: [row, col],
                stop_prob: s.stop_prob,
                action: match s.stop_action {
                    StopAction::Continue => "continue",
                    StopAction::Stop => "stop",
                    StopAction::Forced => "forced",
                }
                .into(),
                top3: ranked,
            }
        })
        .collect();
    Ok(TraceOutput {
        index,
        label: dataset.labels[index],
        prediction: traj.prediction(),
        stop_time: traj.stop_time(),
        steps,
    })
}
