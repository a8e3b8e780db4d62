//! Hybrid REINFORCE + supervised training.
//!
//! For a sampled episode `S` with terminal reward `R` and baseline `b`, the
//! quantity differentiated is
//!
//! ```text
//! -(R - b) * log P(S | x)  +  sum_t CE(class_probs_t, label)
//! ```
//!
//! where `log P(S)` sums the log-densities of every sampled location and every
//! sampled continue/stop decision. The score term reaches the location head, the
//! stop head and (through `h_t`) the recurrent core; the supervised term reaches
//! the classification head and the core only.

use crate::data::{batch_iterator, LabeledDataset};
use crate::glimpse::ImageGray;
use crate::model::{
    rollout, run_episode, run_greedy, threshold_policy_episode, Mode, ModelConfig, RamParams, StopAction,
    StopRule, Trajectory, CONTINUE_UNIT, STOP_UNIT,
};
use crate::numerics::{axpy, matvec_t_acc, outer_acc, sgd_momentum_step, ParamSet, Tensor, LOG_EPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainingError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, value: f64 },
}

pub type Result<T> = std::result::Result<T, TrainingError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Multiplier applied to `lr` every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub samples_per_image: usize,
    pub epochs: usize,
    pub baseline_enabled: bool,
    /// Cross-entropy at every step (true) or at the final step only.
    pub intermediate_supervision: bool,
    /// Step-size multiplier for the location head. Its REINFORCE gradient grows with
    /// the squared norm of the hidden state, so at the shared learning rate the
    /// location means random-walk into tanh saturation within a few batches.
    pub location_lr_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            lr_decay: 0.3,
            lr_decay_every: 30,
            batch_size: 20,
            gamma: 0.99,
            samples_per_image: 1,
            epochs: 30,
            baseline_enabled: true,
            intermediate_supervision: true,
            location_lr_scale: 0.01,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainingError::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.samples_per_image == 0 {
            return bad("samples_per_image must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr must be >= 0 and momentum in [0, 1)");
        }
        if !(self.location_lr_scale >= 0.0) {
            return bad("location_lr_scale must be >= 0");
        }
        if self.lr_decay_every == 0 || !(self.lr_decay > 0.0) {
            return bad("lr_decay must be > 0 and lr_decay_every >= 1");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// `gamma^T` for a correct final prediction, 0 otherwise.
pub fn discounted_reward(traj: &Trajectory, label: usize, gamma: f64) -> f64 {
    if traj.prediction() == label {
        gamma.powi(traj.stop_time() as i32)
    } else {
        0.0
    }
}

/// Exponential moving average of batch rewards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineState {
    pub value: f64,
    pub rate: f64,
}

impl Default for BaselineState {
    fn default() -> Self {
        Self { value: 0.0, rate: 0.9 }
    }
}

impl BaselineState {
    pub fn update(&mut self, batch_mean_reward: f64) {
        self.value = self.rate * self.value + (1.0 - self.rate) * batch_mean_reward;
    }
}

/// Which supervised losses enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Supervision {
    None,
    FinalStep,
    EveryStep,
}

impl Supervision {
    pub fn from_flag(intermediate: bool) -> Self {
        if intermediate {
            Supervision::EveryStep
        } else {
            Supervision::FinalStep
        }
    }
}

/// Supervised loss of an episode under `supervision`.
pub fn supervised_loss(traj: &Trajectory, label: usize, supervision: Supervision) -> f64 {
    let n = traj.steps.len();
    traj.steps
        .iter()
        .enumerate()
        .filter(|(t, _)| match supervision {
            Supervision::None => false,
            Supervision::FinalStep => *t + 1 == n,
            Supervision::EveryStep => true,
        })
        .map(|(_, s)| -(s.class_probs.data()[label] + LOG_EPS).ln())
        .sum()
}

/// `log P(S)` of a recorded trajectory: sampled locations and sampled stop decisions.
/// Deterministic locations (zero score) contribute nothing.
pub fn structure_logprob(traj: &Trajectory, sigma: f64) -> f64 {
    let mut total = 0.0;
    for s in &traj.steps {
        if let Some(ls) = &s.next_location {
            if sigma > 0.0 {
                total += crate::numerics::gaussian_logpdf(ls.raw, ls.mean, sigma);
            }
        }
        if let Some(p) = s.stop_prob {
            match s.stop_action {
                StopAction::Continue => total += (1.0 - p).ln(),
                StopAction::Stop => total += p.ln(),
                StopAction::Forced => {}
            }
        }
    }
    total
}

/// Reverse pass over one episode, adding
/// `scale * d/dθ [ logp_coef * log P(S) + L_S ]` into the parameter gradients.
///
/// `label` is required whenever `supervision` is not `None`.
pub fn backward_episode(
    params: &mut RamParams,
    traj: &Trajectory,
    label: usize,
    logp_coef: f64,
    supervision: Supervision,
    scale: f64,
) {
    let hd = params.hidden_dim();
    let RamParams {
        glimpse_w,
        glimpse_b,
        core_w,
        core_b,
        loc_w,
        loc_b,
        class_w,
        class_b,
        stop_w,
        stop_b,
    } = params;
    let n = traj.steps.len();
    let mut dh = vec![0.0; hd];
    let mut djoint = vec![0.0; 2 * hd];
    let mut joint = vec![0.0; 2 * hd];
    let zero_state = vec![0.0; hd];
    let k = class_b.len();

    for t in (0..n).rev() {
        let s = &traj.steps[t];
        let h = s.h.data();

        let supervised_here = match supervision {
            Supervision::None => false,
            Supervision::FinalStep => t + 1 == n,
            Supervision::EveryStep => true,
        };
        if supervised_here {
            let mut dz: Vec<f64> = s.class_probs.data().iter().map(|p| p * scale).collect();
            dz[label] -= scale;
            outer_acc(&dz, h, class_w.grad.data_mut());
            axpy(1.0, &dz, class_b.grad.data_mut());
            matvec_t_acc(class_w.value.data(), k, hd, &dz, &mut dh);
        }

        if logp_coef != 0.0 {
            if let Some(ls) = &s.next_location {
                if ls.score != [0.0, 0.0] {
                    let dz = [
                        scale * logp_coef * ls.score[0] * (1.0 - ls.mean[0] * ls.mean[0]),
                        scale * logp_coef * ls.score[1] * (1.0 - ls.mean[1] * ls.mean[1]),
                    ];
                    outer_acc(&dz, h, loc_w.grad.data_mut());
                    axpy(1.0, &dz, loc_b.grad.data_mut());
                    matvec_t_acc(loc_w.value.data(), 2, hd, &dz, &mut dh);
                }
            }
            if let Some(p) = s.stop_prob {
                // d log softmax(u)[a] / du = onehot(a) - softmax(u)
                let score_stop = match s.stop_action {
                    StopAction::Stop => Some(1.0 - p),
                    StopAction::Continue => Some(-p),
                    StopAction::Forced => None,
                };
                if let Some(g) = score_stop {
                    let mut dz = [0.0; 2];
                    dz[STOP_UNIT] = scale * logp_coef * g;
                    dz[CONTINUE_UNIT] = -scale * logp_coef * g;
                    outer_acc(&dz, h, stop_w.grad.data_mut());
                    axpy(1.0, &dz, stop_b.grad.data_mut());
                    matvec_t_acc(stop_w.value.data(), 2, hd, &dz, &mut dh);
                }
            }
        }

        // h_t = relu(W_h [h_{t-1}; g_t] + b_h)
        for (d, &hv) in dh.iter_mut().zip(h) {
            if hv <= 0.0 {
                *d = 0.0;
            }
        }
        if dh.iter().all(|&d| d == 0.0) {
            continue;
        }
        let h_prev = if t == 0 { &zero_state[..] } else { traj.steps[t - 1].h.data() };
        joint[..hd].copy_from_slice(h_prev);
        joint[hd..].copy_from_slice(&s.glimpse_hidden);
        outer_acc(&dh, &joint, core_w.grad.data_mut());
        axpy(1.0, &dh, core_b.grad.data_mut());
        djoint.fill(0.0);
        matvec_t_acc(core_w.value.data(), hd, 2 * hd, &dh, &mut djoint);

        // g_t = relu(W_g x_t + b_g)
        let mut dg = djoint[hd..].to_vec();
        for (d, &gv) in dg.iter_mut().zip(&s.glimpse_hidden) {
            if gv <= 0.0 {
                *d = 0.0;
            }
        }
        outer_acc(&dg, &s.glimpse_input, glimpse_w.grad.data_mut());
        axpy(1.0, &dg, glimpse_b.grad.data_mut());

        dh.copy_from_slice(&djoint[..hd]);
    }
}

/// Accumulates `scale * d log P(S) / dθ`.
pub fn structure_logprob_grads(params: &mut RamParams, traj: &Trajectory, scale: f64) {
    backward_episode(params, traj, 0, 1.0, Supervision::None, scale);
}

/// Accumulates the per-episode hybrid gradient
/// `scale * [ -(R - b) d log P(S)/dθ + dL_S/dθ ]` and returns `L_S`.
pub fn episode_gradient(
    params: &mut RamParams,
    traj: &Trajectory,
    label: usize,
    reward: f64,
    baseline: f64,
    supervision: Supervision,
    scale: f64,
) -> f64 {
    backward_episode(params, traj, label, -(reward - baseline), supervision, scale);
    supervised_loss(traj, label, supervision)
}

/// Gradient of every parameter, in `PARAM_NAMES` order.
pub fn collect_grads(params: &RamParams) -> Vec<Tensor> {
    (0..params.num_params()).map(|i| params.param(i).grad.clone()).collect()
}

/// Exact expected hybrid gradient for one image by enumerating every stopping
/// structure. Locations must be deterministic (`location_sigma == 0`) so that
/// structures differ only in their stop time.
pub fn exact_expected_gradient(
    params: &RamParams,
    image: &ImageGray,
    label: usize,
    config: &ModelConfig,
    gamma: f64,
    supervision: Supervision,
) -> Result<Vec<Tensor>> {
    if config.location_sigma != 0.0 {
        return Err(TrainingError::InvalidConfig(
            "exact enumeration needs a deterministic location policy (location_sigma = 0)".into(),
        ));
    }
    if !config.dynamic {
        return Err(TrainingError::InvalidConfig(
            "exact enumeration needs dynamic stopping".into(),
        ));
    }
    let mut scratch = params.fresh_copy();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (_, prob, traj) in enumerate_structures(params, image, config, &mut rng) {
        let reward = discounted_reward(&traj, label, gamma);
        backward_episode(&mut scratch, &traj, label, -reward, supervision, prob);
    }
    Ok(collect_grads(&scratch))
}

/// Every stop time `1..=max_steps` with its probability and trajectory.
pub fn enumerate_structures(
    params: &RamParams,
    image: &ImageGray,
    config: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, f64, Trajectory)> {
    (1..=config.max_steps)
        .map(|at| {
            let traj = rollout(image, params, config, Mode::Greedy, StopRule::Scripted(at), rng);
            let prob = structure_logprob(&traj, 0.0).exp();
            (at, prob, traj)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochMetrics {
    pub loss: f64,
    pub reward_mean: f64,
    pub steps_mean: f64,
    pub accuracy: f64,
    pub wallclock_s: f64,
}

fn episode_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_E915_0DE5);
    rng.set_stream(epoch as u64);
    rng
}

/// One pass over `dataset`: `samples_per_image` sampled episodes per image,
/// gradients averaged over the batch, one momentum step per batch.
pub fn train_epoch(
    dataset: &LabeledDataset,
    params: &mut RamParams,
    model: &ModelConfig,
    train: &TrainConfig,
    baseline: &mut BaselineState,
    epoch: usize,
) -> Result<EpochMetrics> {
    let start = Instant::now();
    let lr = train.lr_at(epoch);
    let supervision = Supervision::from_flag(train.intermediate_supervision);
    let mut rng = episode_rng(train.seed, epoch);
    let m = train.samples_per_image;
    let (mut loss_sum, mut reward_sum, mut steps_sum, mut correct) = (0.0, 0.0, 0usize, 0usize);
    let mut episodes = 0usize;

    params.zero_grads();
    for (b, batch) in batch_iterator(dataset.len(), train.batch_size, train.seed, epoch)
        .into_iter()
        .enumerate()
    {
        let scale = 1.0 / (batch.len() * m) as f64;
        let b_value = if train.baseline_enabled { baseline.value } else { 0.0 };
        let mut batch_reward = 0.0;
        for &i in &batch {
            let (image, label) = (&dataset.images[i], dataset.labels[i]);
            for _ in 0..m {
                let traj = run_episode(image, params, model, Mode::Sample, &mut rng);
                let reward = discounted_reward(&traj, label, train.gamma);
                let loss = episode_gradient(params, &traj, label, reward, b_value, supervision, scale);
                if !loss.is_finite() {
                    return Err(TrainingError::NonFinite {
                        epoch,
                        batch: b,
                        value: loss,
                    });
                }
                loss_sum += loss;
                batch_reward += reward;
                steps_sum += traj.stop_time();
                correct += usize::from(traj.prediction() == label);
                episodes += 1;
            }
        }
        if train.location_lr_scale != 1.0 {
            for p in [&mut params.loc_w, &mut params.loc_b] {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= train.location_lr_scale);
            }
        }
        sgd_momentum_step(params, lr, train.momentum);
        params.zero_grads();
        reward_sum += batch_reward;
        baseline.update(batch_reward / (batch.len() * m) as f64);
    }
    let n = episodes.max(1) as f64;
    Ok(EpochMetrics {
        loss: loss_sum / n,
        reward_mean: reward_sum / n,
        steps_mean: steps_sum as f64 / n,
        accuracy: correct as f64 / n,
        wallclock_s: start.elapsed().as_secs_f64(),
    })
}

/// Greedy evaluation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub count: usize,
    pub errors: usize,
    pub loss: f64,
    /// `histogram[t - 1]` = episodes that stopped after `t` steps.
    pub histogram: Vec<usize>,
    /// Correctly classified episodes, by stop time.
    pub correct_histogram: Vec<usize>,
}

impl EvalReport {
    pub fn error_pct(&self) -> f64 {
        100.0 * self.errors as f64 / self.count.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        1.0 - self.errors as f64 / self.count.max(1) as f64
    }

    pub fn avg_steps(&self) -> f64 {
        let total: usize = self.histogram.iter().enumerate().map(|(i, c)| (i + 1) * c).sum();
        total as f64 / self.count.max(1) as f64
    }

    /// Mean terminal reward `gamma^T * correct`.
    pub fn reward_mean(&self, gamma: f64) -> f64 {
        let total: f64 = self
            .correct_histogram
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f64 * gamma.powi(i as i32 + 1))
            .sum();
        total / self.count.max(1) as f64
    }

    fn record(&mut self, traj: &Trajectory, label: usize) {
        self.count += 1;
        let correct = traj.prediction() == label;
        self.errors += usize::from(!correct);
        self.correct_histogram[traj.stop_time() - 1] += usize::from(correct);
        self.loss += -(traj.final_probs().data()[label] + LOG_EPS).ln();
        self.histogram[traj.stop_time() - 1] += 1;
    }

    fn new(max_steps: usize) -> Self {
        Self {
            count: 0,
            errors: 0,
            loss: 0.0,
            histogram: vec![0; max_steps],
            correct_histogram: vec![0; max_steps],
        }
    }

    fn finish(mut self) -> Self {
        self.loss /= self.count.max(1) as f64;
        self
    }
}

/// Evaluates with greedy actions (or sampled ones when `mode` is `Sample`,
/// using `seed`).
pub fn evaluate(
    dataset: &LabeledDataset,
    params: &RamParams,
    config: &ModelConfig,
    mode: Mode,
    seed: u64,
) -> EvalReport {
    let mut report = EvalReport::new(config.max_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (image, &label) in dataset.images.iter().zip(&dataset.labels) {
        let traj = match mode {
            Mode::Greedy => run_greedy(image, params, config),
            Mode::Sample => run_episode(image, params, config, Mode::Sample, &mut rng),
        };
        report.record(&traj, label);
    }
    report.finish()
}

/// Evaluates the confidence-threshold stopping rule on a fixed-length model.
pub fn evaluate_threshold(
    dataset: &LabeledDataset,
    params: &RamParams,
    config: &ModelConfig,
    threshold: f64,
) -> EvalReport {
    let mut report = EvalReport::new(config.max_steps);
    for (image, &label) in dataset.images.iter().zip(&dataset.labels) {
        report.record(&threshold_policy_episode(image, params, threshold, config), label);
    }
    report.finish()
}

/// Stages of increasing episode length. Each stage starts from the previous
/// stage's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumSchedule {
    stages: Vec<(usize, usize)>,
}

impl CurriculumSchedule {
    pub fn new(stages: Vec<(usize, usize)>) -> Result<Self> {
        if stages.is_empty() {
            return Err(TrainingError::InvalidConfig("empty curriculum".into()));
        }
        if stages[0].0 == 0 || stages.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(TrainingError::InvalidConfig(
                "curriculum step counts must be >= 1 and strictly increasing".into(),
            ));
        }
        Ok(Self { stages })
    }

    /// Parses `"1:20,3:20,5:20"` (steps:epochs pairs).
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || TrainingError::InvalidConfig(format!("bad curriculum {text:?}"));
        let stages = text
            .split(',')
            .map(|part| {
                let (t, e) = part.trim().split_once(':').ok_or_else(bad)?;
                Ok((t.trim().parse().map_err(|_| bad())?, e.trim().parse().map_err(|_| bad())?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(stages)
    }

    pub fn stages(&self) -> &[(usize, usize)] {
        &self.stages
    }

    pub fn to_text(&self) -> String {
        self.stages
            .iter()
            .map(|(t, e)| format!("{t}:{e}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Progress report passed to training observers after every epoch.
#[derive(Debug, Clone)]
pub struct EpochReport {
    pub stage_steps: usize,
    pub epoch: usize,
    pub train: EpochMetrics,
    pub validation: Option<EvalReport>,
}

/// A trained stage of the curriculum.
#[derive(Debug, Clone)]
pub struct StageResult {
    pub steps: usize,
    pub config: ModelConfig,
    pub params: RamParams,
}

/// Runs `epochs` of training. With a validation set, `params` ends up holding the
/// epoch with the highest greedy validation reward (earliest on ties); without one,
/// the last epoch.
fn run_stage(
    train_set: &LabeledDataset,
    validation: Option<&LabeledDataset>,
    params: &mut RamParams,
    model: &ModelConfig,
    train: &TrainConfig,
    epochs: std::ops::Range<usize>,
    observer: &mut dyn FnMut(&EpochReport),
) -> Result<()> {
    let mut baseline = BaselineState::default();
    let mut best: Option<(f64, RamParams)> = None;
    for epoch in epochs {
        let metrics = train_epoch(train_set, params, model, train, &mut baseline, epoch)?;
        let validation = validation.map(|v| evaluate(v, params, model, Mode::Greedy, 0));
        if let Some(v) = &validation {
            let score = v.reward_mean(train.gamma);
            if best.as_ref().map_or(true, |(b, _)| score > *b) {
                best = Some((score, params.fresh_copy()));
            }
        }
        observer(&EpochReport {
            stage_steps: model.max_steps,
            epoch,
            train: metrics,
            validation,
        });
    }
    if let Some((_, p)) = best {
        *params = p;
    }
    Ok(())
}

/// Trains fixed-length models of increasing length, transplanting the selected
/// parameters of one stage into the next. Epochs are counted across the whole curriculum, so
/// the learning-rate schedule does not restart at each stage. `on_stage` sees each
/// stage as soon as it finishes; every stage is also returned.
pub fn train_ram_curriculum(
    train_set: &LabeledDataset,
    validation: Option<&LabeledDataset>,
    schedule: &CurriculumSchedule,
    model: &ModelConfig,
    train: &TrainConfig,
    observer: &mut dyn FnMut(&EpochReport),
    on_stage: &mut dyn FnMut(&StageResult),
) -> Result<Vec<StageResult>> {
    train.validate()?;
    model
        .validate()
        .map_err(|e| TrainingError::InvalidConfig(e.to_string()))?;
    let mut params = crate::model::init_params(model, train.seed);
    let mut results = Vec::with_capacity(schedule.stages().len());
    let mut first_epoch = 0;
    for &(steps, epochs) in schedule.stages() {
        let stage_model = ModelConfig {
            max_steps: steps,
            dynamic: false,
            ..model.clone()
        };
        params = params.fresh_copy();
        let span = first_epoch..first_epoch + epochs;
        run_stage(train_set, validation, &mut params, &stage_model, train, span, observer)?;
        first_epoch += epochs;
        let stage = StageResult {
            steps,
            config: stage_model,
            params: params.fresh_copy(),
        };
        on_stage(&stage);
        results.push(stage);
    }
    Ok(results)
}

/// Enables learned stopping on a trained fixed-length model and fine-tunes the
/// whole network for `train.epochs` epochs. The stop head is re-initialized.
pub fn finetune_dtram(
    ram_params: &RamParams,
    train_set: &LabeledDataset,
    validation: Option<&LabeledDataset>,
    model: &ModelConfig,
    train: &TrainConfig,
    observer: &mut dyn FnMut(&EpochReport),
) -> Result<RamParams> {
    train.validate()?;
    let model = ModelConfig {
        dynamic: true,
        ..model.clone()
    };
    let mut params = ram_params.fresh_copy();
    params.reset_stop_head(train.seed ^ 0xA7);
    run_stage(train_set, validation, &mut params, &model, train, 0..train.epochs, observer)?;
    Ok(params.fresh_copy())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, LocationSample, StepRecord};
    use crate::glimpse::Location;
    use rand::Rng;

    fn tiny_config(dynamic: bool, sigma: f64) -> ModelConfig {
        ModelConfig {
            glimpse_size: 2,
            hidden_dim: 5,
            num_classes: 3,
            max_steps: 3,
            location_sigma: sigma,
            dynamic,
        }
    }

    fn image(seed: u64) -> ImageGray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGray::new(4, 4, (0..16).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn fake_traj(steps: usize, probs: Vec<f64>) -> Trajectory {
        let step = StepRecord {
            observed_at: Location::CENTER,
            glimpse_input: vec![],
            glimpse_hidden: vec![],
            h: Tensor::zeros(&[1]),
            class_probs: Tensor::from_vec(probs),
            stop_prob: None,
            stop_action: StopAction::Continue,
            next_location: None,
        };
        Trajectory {
            steps: vec![step; steps],
        }
    }

    #[test]
    fn reward_cases() {
        let t = fake_traj(5, vec![0.1, 0.9]);
        assert!((discounted_reward(&t, 1, 0.99) - 0.9509900499).abs() < 1e-10);
        assert_eq!(discounted_reward(&t, 0, 0.99), 0.0);
        assert_eq!(discounted_reward(&t, 1, 1.0), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { gamma: 0.0, ..Default::default() },
            TrainConfig { gamma: 1.1, ..Default::default() },
            TrainConfig { samples_per_image: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let c = TrainConfig { lr: 0.01, lr_decay: 0.3, lr_decay_every: 30, ..Default::default() };
        assert_eq!(c.lr_at(29), 0.01);
        assert!((c.lr_at(30) - 0.003).abs() < 1e-15);
    }

    #[test]
    fn baseline_moving_average() {
        let mut b = BaselineState::default();
        b.update(1.0);
        assert!((b.value - 0.1).abs() < 1e-15);
        b.update(1.0);
        assert!((b.value - 0.19).abs() < 1e-15);
    }

    #[test]
    fn centered_reward_leaves_only_supervised_gradient() {
        let c = tiny_config(true, 0.3);
        let p = init_params(&c, 2);
        let img = image(1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let traj = run_episode(&img, &p, &c, Mode::Sample, &mut rng);

        let mut a = p.fresh_copy();
        episode_gradient(&mut a, &traj, 1, 0.7, 0.7, Supervision::EveryStep, 1.0);
        let mut b = p.fresh_copy();
        backward_episode(&mut b, &traj, 1, 0.0, Supervision::EveryStep, 1.0);
        assert_eq!(collect_grads(&a), collect_grads(&b));
        assert!(a.loc_w.grad.data().iter().all(|&g| g == 0.0));
        assert!(a.stop_w.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_step_stop_score() {
        let c = tiny_config(true, 0.3);
        let p = init_params(&c, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = rollout(&image(3), &p, &c, Mode::Greedy, StopRule::Scripted(1), &mut rng);
        let prob = traj.steps[0].stop_prob.unwrap();
        let mut g = p.fresh_copy();
        structure_logprob_grads(&mut g, &traj, 1.0);
        let db = g.stop_b.grad.data();
        assert!((db[STOP_UNIT] - (1.0 - prob)).abs() < 1e-15);
        assert!((db[CONTINUE_UNIT] + (1.0 - prob)).abs() < 1e-15);
    }

    #[test]
    fn location_score_vanishes_at_mean() {
        let c = tiny_config(false, 0.3);
        let p = init_params(&c, 2);
        let mut traj = run_greedy(&image(3), &p, &c);
        // greedy locations already sit at the mean
        let mut g = p.fresh_copy();
        structure_logprob_grads(&mut g, &traj, 1.0);
        assert!(collect_grads(&g).iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        // a hand-made off-mean sample does not
        let s = traj.steps[0].next_location.unwrap();
        traj.steps[0].next_location = Some(LocationSample {
            raw: [s.mean[0] + 0.1, s.mean[1]],
            score: [0.1 / 0.09, 0.0],
            ..s
        });
        structure_logprob_grads(&mut g, &traj, 1.0);
        assert!(g.loc_b.grad.data()[0] != 0.0);
    }

    #[test]
    fn structure_logprob_gradient_matches_finite_differences() {
        let c = tiny_config(true, 0.3);
        let mut p = init_params(&c, 5);
        p.stop_b.value.data_mut()[STOP_UNIT] = -0.8;
        let img = image(2);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // pick an episode that runs all three steps so both policies contribute
        let traj = loop {
            let t = run_episode(&img, &p, &c, Mode::Sample, &mut rng);
            if t.stop_time() == 3 {
                break t;
            }
        };
        let mut g = p.fresh_copy();
        structure_logprob_grads(&mut g, &traj, 1.0);
        let err = crate::numerics::finite_difference_check(&mut g, 1e-5, |q| {
            replay_logprob(q, &img, &c, &traj)
        });
        assert!(err < 1e-5, "{err}");
    }

    /// log P(S) of `traj`'s actions under `params`, holding the actions fixed.
    fn replay_logprob(params: &RamParams, img: &ImageGray, c: &ModelConfig, traj: &Trajectory) -> f64 {
        let mut h = Tensor::zeros(&[c.hidden_dim]);
        let mut total = 0.0;
        let mut loc = Location::CENTER;
        for s in &traj.steps {
            let patch = crate::glimpse::extract_glimpse(img, loc, c.glimpse_size);
            h = crate::model::core_step(&h, &patch, loc, params);
            let p = crate::model::stop_probability(&h, params);
            match s.stop_action {
                StopAction::Continue => total += (1.0 - p).ln(),
                StopAction::Stop => total += p.ln(),
                StopAction::Forced => {}
            }
            if let Some(ls) = &s.next_location {
                let mean = crate::model::location_mean(&h, params);
                total += crate::numerics::gaussian_logpdf(ls.raw, mean, c.location_sigma);
                loc = ls.location;
            }
        }
        total
    }

    #[test]
    fn exact_gradient_rejects_stochastic_locations() {
        let c = tiny_config(true, 0.1);
        let p = init_params(&c, 1);
        assert!(exact_expected_gradient(&p, &image(0), 0, &c, 0.9, Supervision::EveryStep).is_err());
    }

    #[test]
    fn exact_gradient_with_certain_first_stop_is_single_structure() {
        let c = tiny_config(true, 0.0);
        let mut p = init_params(&c, 6);
        p.stop_b.value.data_mut()[STOP_UNIT] = 800.0;
        let img = image(9);
        let exact = exact_expected_gradient(&p, &img, 2, &c, 0.9, Supervision::EveryStep).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = rollout(&img, &p, &c, Mode::Greedy, StopRule::Scripted(1), &mut rng);
        let mut g = p.fresh_copy();
        let r = discounted_reward(&traj, 2, 0.9);
        episode_gradient(&mut g, &traj, 2, r, 0.0, Supervision::EveryStep, 1.0);
        for (a, b) in exact.iter().zip(collect_grads(&g)) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_gradient_two_structure_mixture() {
        let c = ModelConfig {
            max_steps: 2,
            ..tiny_config(true, 0.0)
        };
        let mut p = init_params(&c, 6);
        p.stop_w.value.fill(0.0);
        p.stop_b.value.fill(0.0);
        let img = image(9);
        let exact = exact_expected_gradient(&p, &img, 0, &c, 0.9, Supervision::EveryStep).unwrap();
        let mut mix = p.fresh_copy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for at in 1..=2 {
            let traj = rollout(&img, &p, &c, Mode::Greedy, StopRule::Scripted(at), &mut rng);
            let r = discounted_reward(&traj, 0, 0.9);
            episode_gradient(&mut mix, &traj, 0, r, 0.0, Supervision::EveryStep, 0.5);
        }
        for (a, b) in exact.iter().zip(collect_grads(&mix)) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn curriculum_parsing() {
        let s = CurriculumSchedule::parse("1:20, 3:20,5:10").unwrap();
        assert_eq!(s.stages(), &[(1, 20), (3, 20), (5, 10)]);
        assert_eq!(s.to_text(), "1:20,3:20,5:10");
        assert!(CurriculumSchedule::parse("3:1,3:1").is_err());
        assert!(CurriculumSchedule::parse("0:1").is_err());
        assert!(CurriculumSchedule::parse("1-2").is_err());
        assert!(CurriculumSchedule::new(vec![]).is_err());
    }

    #[test]
    fn eval_report_average_matches_histogram() {
        let r = EvalReport {
            count: 4,
            errors: 1,
            loss: 0.0,
            histogram: vec![1, 0, 3],
            correct_histogram: vec![1, 0, 2],
        };
        assert_eq!(r.avg_steps(), 2.5);
        assert!((r.reward_mean(0.5) - (0.5 + 2.0 * 0.125) / 4.0).abs() < 1e-15);
        assert_eq!(r.error_pct(), 25.0);
    }

    fn tiny_dataset(n: usize) -> LabeledDataset {
        let images = (0..n as u64).map(image).collect::<Vec<_>>();
        let labels = (0..n).map(|i| i % 3).collect();
        LabeledDataset::new(images, labels).unwrap()
    }

    fn flat(params: &RamParams) -> Vec<f64> {
        (0..params.num_params())
            .flat_map(|i| params.param(i).value.data().to_vec())
            .collect()
    }

    #[test]
    fn zero_lr_leaves_parameters_but_reports_metrics() {
        let data = tiny_dataset(12);
        let model = tiny_config(true, 0.2);
        let mut params = init_params(&model, 4);
        let before = flat(&params);
        let train = TrainConfig { lr: 0.0, batch_size: 5, ..Default::default() };
        let m = train_epoch(&data, &mut params, &model, &train, &mut BaselineState::default(), 0).unwrap();
        assert_eq!(flat(&params), before);
        assert!(m.loss > 0.0 && (1.0..=3.0).contains(&m.steps_mean));
    }

    #[test]
    fn zero_location_scale_freezes_only_the_location_head() {
        let data = tiny_dataset(12);
        let model = tiny_config(false, 0.2);
        let mut params = init_params(&model, 4);
        let (lw, cw) = (params.loc_w.value.clone(), params.core_w.value.clone());
        let train = TrainConfig { location_lr_scale: 0.0, batch_size: 4, ..Default::default() };
        train_epoch(&data, &mut params, &model, &train, &mut BaselineState::default(), 0).unwrap();
        assert_eq!(params.loc_w.value, lw);
        assert_ne!(params.core_w.value, cw);
    }

    #[test]
    fn one_epoch_on_a_small_subset_improves_training_accuracy() {
        let data = tiny_dataset(30);
        let model = tiny_config(false, 0.1);
        let mut params = init_params(&model, 8);
        let before = evaluate(&data, &params, &model, Mode::Greedy, 0).accuracy();
        let train = TrainConfig { lr: 0.05, batch_size: 2, ..Default::default() };
        for epoch in 0..3 {
            train_epoch(&data, &mut params, &model, &train, &mut BaselineState::default(), epoch).unwrap();
        }
        assert!(evaluate(&data, &params, &model, Mode::Greedy, 0).accuracy() > before);
    }

    #[test]
    fn curriculum_counts_epochs_across_stages() {
        let data = tiny_dataset(6);
        let model = tiny_config(false, 0.1);
        let schedule = CurriculumSchedule::parse("1:2,3:1").unwrap();
        let mut seen = vec![];
        let mut stages = vec![];
        let results = train_ram_curriculum(
            &data,
            None,
            &schedule,
            &model,
            &TrainConfig { batch_size: 3, ..Default::default() },
            &mut |r| seen.push((r.stage_steps, r.epoch)),
            &mut |s| stages.push(s.steps),
        )
        .unwrap();
        assert_eq!(seen, vec![(1, 0), (1, 1), (3, 2)]);
        assert_eq!(stages, vec![1, 3]);
        assert_eq!(results[1].config.max_steps, 3);
    }

    #[test]
    fn zero_finetune_epochs_only_resets_the_stop_head() {
        let data = tiny_dataset(6);
        let model = tiny_config(true, 0.1);
        let ram = init_params(&model, 2);
        let train = TrainConfig { epochs: 0, ..Default::default() };
        let out = finetune_dtram(&ram, &data, None, &model, &train, &mut |_| {}).unwrap();
        let mut expected = ram.fresh_copy();
        expected.reset_stop_head(train.seed ^ 0xA7);
        assert_eq!(flat(&out), flat(&expected));
        assert_eq!(
            evaluate(&data, &out, &model, Mode::Greedy, 0),
            evaluate(&data, &expected, &model, Mode::Greedy, 0)
        );
    }

    #[test]
    fn stage_keeps_the_best_validation_epoch() {
        let data = tiny_dataset(24);
        let val = tiny_dataset(9);
        let model = tiny_config(false, 0.3);
        let train = TrainConfig { lr: 0.2, batch_size: 2, ..Default::default() };
        let mut scores = vec![];
        let results = train_ram_curriculum(
            &data,
            Some(&val),
            &CurriculumSchedule::parse("2:6").unwrap(),
            &model,
            &train,
            &mut |r| scores.push(r.validation.as_ref().unwrap().reward_mean(train.gamma)),
            &mut |_| {},
        )
        .unwrap();
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let chosen = evaluate(&val, &results[0].params, &results[0].config, Mode::Greedy, 0);
        assert_eq!(chosen.reward_mean(train.gamma), best);
    }
}
