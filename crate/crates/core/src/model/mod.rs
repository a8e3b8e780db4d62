//! The recurrent attention network and its episode rollouts.
//!
//! One step of the network:
//!
//! ```text
//! g_t = relu(W_g [patch(x, l_{t-1}); l_{t-1}] + b_g)
//! h_t = relu(W_h [h_{t-1}; g_t] + b_h)
//! class probabilities  = softmax(W_c h_t + b_c)
//! stop probability     = softmax(W_a h_t + b_a)[STOP]
//! next location mean   = tanh(W_l h_t + b_l), sampled from N(mean, sigma^2 I)
//! ```
//!
//! Episodes start from `h_0 = 0` at the image center.

pub mod checkpoint;

use crate::glimpse::{extract_glimpse_into, GlimpsePatch, ImageGray, Location};
use crate::numerics::{argmax, matvec_acc, softmax_in_place, ParamSet, Parameter, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Output unit of the stop head meaning "keep looking".
pub const CONTINUE_UNIT: usize = 0;
/// Output unit of the stop head meaning "stop and answer".
pub const STOP_UNIT: usize = 1;

/// Initial stop probability of a freshly initialized stop head.
pub const INITIAL_STOP_PROB: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub glimpse_size: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub max_steps: usize,
    /// Standard deviation of the location policy in normalized units. Zero makes the
    /// location policy deterministic (always its mean).
    pub location_sigma: f64,
    /// Learned stopping (true) or a fixed number of glimpses (false).
    pub dynamic: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            glimpse_size: 8,
            hidden_dim: 256,
            num_classes: 10,
            max_steps: 7,
            location_sigma: 0.15,
            dynamic: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.glimpse_size == 0 {
            return bad("glimpse_size must be >= 1");
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be >= 1");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1");
        }
        if !(self.location_sigma >= 0.0) || !self.location_sigma.is_finite() {
            return bad("location_sigma must be finite and >= 0");
        }
        Ok(())
    }

    /// Length of the glimpse-layer input: flattened patch plus the 2-D location.
    pub fn glimpse_input_dim(&self) -> usize {
        self.glimpse_size * self.glimpse_size + 2
    }
}

/// All trainable weights. Matrices are row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct RamParams {
    pub glimpse_w: Parameter,
    pub glimpse_b: Parameter,
    pub core_w: Parameter,
    pub core_b: Parameter,
    pub loc_w: Parameter,
    pub loc_b: Parameter,
    pub class_w: Parameter,
    pub class_b: Parameter,
    pub stop_w: Parameter,
    pub stop_b: Parameter,
}

pub const PARAM_NAMES: [&str; 10] = [
    "glimpse.w",
    "glimpse.b",
    "core.w",
    "core.b",
    "locate.w",
    "locate.b",
    "classify.w",
    "classify.b",
    "stop.w",
    "stop.b",
];

impl ParamSet for RamParams {
    fn num_params(&self) -> usize {
        PARAM_NAMES.len()
    }

    fn param(&self, index: usize) -> &Parameter {
        match index {
            0 => &self.glimpse_w,
            1 => &self.glimpse_b,
            2 => &self.core_w,
            3 => &self.core_b,
            4 => &self.loc_w,
            5 => &self.loc_b,
            6 => &self.class_w,
            7 => &self.class_b,
            8 => &self.stop_w,
            9 => &self.stop_b,
            _ => panic!("parameter index {index} out of range"),
        }
    }

    fn param_mut(&mut self, index: usize) -> &mut Parameter {
        match index {
            0 => &mut self.glimpse_w,
            1 => &mut self.glimpse_b,
            2 => &mut self.core_w,
            3 => &mut self.core_b,
            4 => &mut self.loc_w,
            5 => &mut self.loc_b,
            6 => &mut self.class_w,
            7 => &mut self.class_b,
            8 => &mut self.stop_w,
            9 => &mut self.stop_b,
            _ => panic!("parameter index {index} out of range"),
        }
    }
}

impl RamParams {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden_dim;
        let p = |shape: &[usize]| Parameter::new(Tensor::zeros(shape));
        Self {
            glimpse_w: p(&[h, config.glimpse_input_dim()]),
            glimpse_b: p(&[h]),
            core_w: p(&[h, 2 * h]),
            core_b: p(&[h]),
            loc_w: p(&[2, h]),
            loc_b: p(&[2]),
            class_w: p(&[config.num_classes, h]),
            class_b: p(&[config.num_classes]),
            stop_w: p(&[2, h]),
            stop_b: p(&[2]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.core_b.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_b.len()
    }

    pub fn glimpse_input_dim(&self) -> usize {
        self.glimpse_w.value.shape()[1]
    }

    /// Whether the parameter shapes agree with `config`.
    pub fn matches(&self, config: &ModelConfig) -> bool {
        let reference = Self::zeros(config);
        (0..self.num_params()).all(|i| self.param(i).value.shape() == reference.param(i).value.shape())
    }

    /// Copies parameter values, dropping gradients and momentum.
    pub fn fresh_copy(&self) -> Self {
        let mut out = self.clone();
        for i in 0..out.num_params() {
            let p = out.param_mut(i);
            p.zero_grad();
            p.reset_velocity();
        }
        out
    }

    /// Re-draws the stop head as at initialization.
    pub fn reset_stop_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform_fill(&mut self.stop_w, &mut rng);
        self.stop_b.value.fill(0.0);
        self.stop_b.value.data_mut()[STOP_UNIT] = (INITIAL_STOP_PROB / (1.0 - INITIAL_STOP_PROB)).ln();
        self.stop_w.zero_grad();
        self.stop_w.reset_velocity();
        self.stop_b.zero_grad();
        self.stop_b.reset_velocity();
    }
}

fn uniform_fill<R: Rng>(p: &mut Parameter, rng: &mut R) {
    let fan_in = p.value.shape()[1];
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in p.value.data_mut() {
        *v = rng.gen_range(-bound..=bound);
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases, and a stop bias
/// giving an initial stop probability of about 0.05.
pub fn init_params(config: &ModelConfig, seed: u64) -> RamParams {
    let mut params = RamParams::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in [
        &mut params.glimpse_w,
        &mut params.core_w,
        &mut params.loc_w,
        &mut params.class_w,
    ] {
        uniform_fill(w, &mut rng);
    }
    params.reset_stop_head(rng.gen());
    params
}

/// How an action is chosen from its policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopAction {
    Continue,
    Stop,
    /// The episode hit its step limit without choosing to stop.
    Forced,
}

/// One draw from the location policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationSample {
    pub mean: [f64; 2],
    /// Raw draw before clamping.
    pub raw: [f64; 2],
    /// The clamped location actually looked at next.
    pub location: Location,
    /// `(raw - mean) / sigma^2`, zero for a deterministic policy.
    pub score: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Where this step's glimpse was taken (`l_{t-1}`).
    pub observed_at: Location,
    /// Flattened patch followed by `observed_at`.
    pub glimpse_input: Vec<f64>,
    /// Post-activation glimpse features.
    pub glimpse_hidden: Vec<f64>,
    pub h: Tensor,
    pub class_probs: Tensor,
    /// Stop probability when the stop head was consulted.
    pub stop_prob: Option<f64>,
    pub stop_action: StopAction,
    /// Location chosen for the next step; `None` on the last step.
    pub next_location: Option<LocationSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn stop_time(&self) -> usize {
        self.steps.len()
    }

    pub fn final_probs(&self) -> &Tensor {
        &self.steps.last().expect("trajectory has at least one step").class_probs
    }

    pub fn prediction(&self) -> usize {
        argmax(self.final_probs().data())
    }

    pub fn forced_stop(&self) -> bool {
        self.steps
            .last()
            .is_some_and(|s| s.stop_action == StopAction::Forced)
    }
}

fn affine(w: &Parameter, b: &Parameter, x: &[f64]) -> Vec<f64> {
    let shape = w.value.shape();
    let mut y = b.value.data().to_vec();
    matvec_acc(w.value.data(), shape[0], shape[1], x, &mut y);
    y
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// Forward through the glimpse layer and recurrent core, returning
/// `(glimpse_hidden, h)`.
pub(crate) fn core_forward(params: &RamParams, h_prev: &[f64], glimpse_input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut g = affine(&params.glimpse_w, &params.glimpse_b, glimpse_input);
    relu_in_place(&mut g);
    let mut joint = Vec::with_capacity(h_prev.len() + g.len());
    joint.extend_from_slice(h_prev);
    joint.extend_from_slice(&g);
    let mut h = affine(&params.core_w, &params.core_b, &joint);
    relu_in_place(&mut h);
    (g, h)
}

fn glimpse_input(patch: &[f64], l: Location) -> Vec<f64> {
    let mut x = Vec::with_capacity(patch.len() + 2);
    x.extend_from_slice(patch);
    x.push(l.y);
    x.push(l.x);
    x
}

/// One recurrent update `h_t = f_h(h_{t-1}, patch, l_{t-1})`.
pub fn core_step(h_prev: &Tensor, patch: &GlimpsePatch, l_prev: Location, params: &RamParams) -> Tensor {
    let x = glimpse_input(patch.pixels().data(), l_prev);
    let (_, h) = core_forward(params, h_prev.data(), &x);
    Tensor::from_vec(h)
}

pub fn classify(h: &Tensor, params: &RamParams) -> Tensor {
    let mut z = affine(&params.class_w, &params.class_b, h.data());
    softmax_in_place(&mut z);
    Tensor::from_vec(z)
}

/// Mean of the location policy, `tanh(W_l h + b_l)`.
pub fn location_mean(h: &Tensor, params: &RamParams) -> [f64; 2] {
    let z = affine(&params.loc_w, &params.loc_b, h.data());
    [z[0].tanh(), z[1].tanh()]
}

pub fn locate<R: Rng + ?Sized>(
    h: &Tensor,
    params: &RamParams,
    sigma: f64,
    mode: Mode,
    rng: &mut R,
) -> LocationSample {
    let mean = location_mean(h, params);
    if mode == Mode::Greedy || sigma == 0.0 {
        return LocationSample {
            mean,
            raw: mean,
            location: Location::from_array(mean),
            score: [0.0, 0.0],
        };
    }
    let ny: f64 = rng.sample(StandardNormal);
    let nx: f64 = rng.sample(StandardNormal);
    let raw = [mean[0] + sigma * ny, mean[1] + sigma * nx];
    let var = sigma * sigma;
    LocationSample {
        mean,
        raw,
        location: Location::from_array(raw).clamped(),
        score: [(raw[0] - mean[0]) / var, (raw[1] - mean[1]) / var],
    }
}

pub fn stop_probability(h: &Tensor, params: &RamParams) -> f64 {
    let mut z = affine(&params.stop_w, &params.stop_b, h.data());
    softmax_in_place(&mut z);
    z[STOP_UNIT]
}

/// Returns `(stop, stop_prob)`.
pub fn stop_decision<R: Rng + ?Sized>(h: &Tensor, params: &RamParams, mode: Mode, rng: &mut R) -> (bool, f64) {
    let p = stop_probability(h, params);
    let stop = match mode {
        Mode::Greedy => p >= 0.5,
        Mode::Sample => rng.gen::<f64>() < p,
    };
    (stop, p)
}

/// Who decides when an episode ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Always run `max_steps` glimpses.
    FixedLength,
    /// The learned stop head.
    Learned(Mode),
    /// Stop once the top class probability reaches the threshold.
    Confidence(f64),
    /// Stop exactly at the given step (clipped to `max_steps`), still recording the
    /// stop head's probabilities. Used to enumerate stopping structures.
    Scripted(usize),
}

/// General rollout loop shared by all episode variants.
pub fn rollout<R: Rng + ?Sized>(
    image: &ImageGray,
    params: &RamParams,
    config: &ModelConfig,
    location_mode: Mode,
    stop_rule: StopRule,
    rng: &mut R,
) -> Trajectory {
    let g = config.glimpse_size;
    let t_max = config.max_steps;
    let mut steps: Vec<StepRecord> = Vec::with_capacity(t_max);
    let mut h_prev = vec![0.0; params.hidden_dim()];
    let mut loc = Location::CENTER;
    let mut patch = vec![0.0; g * g];
    for t in 1..=t_max {
        extract_glimpse_into(image, loc, g, &mut patch);
        let x = glimpse_input(&patch, loc);
        let (gh, h) = core_forward(params, &h_prev, &x);
        let h = Tensor::from_vec(h);
        let class_probs = classify(&h, params);
        let last = t == t_max;

        let (stop_prob, action) = match stop_rule {
            StopRule::FixedLength => (None, if last { StopAction::Forced } else { StopAction::Continue }),
            StopRule::Learned(mode) => {
                if last {
                    (Some(stop_probability(&h, params)), StopAction::Forced)
                } else {
                    let (stop, p) = stop_decision(&h, params, mode, rng);
                    (Some(p), if stop { StopAction::Stop } else { StopAction::Continue })
                }
            }
            StopRule::Confidence(tau) => {
                let top = class_probs.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let action = if top >= tau {
                    StopAction::Stop
                } else if last {
                    StopAction::Forced
                } else {
                    StopAction::Continue
                };
                (None, action)
            }
            StopRule::Scripted(at) => {
                let p = stop_probability(&h, params);
                let action = if last {
                    StopAction::Forced
                } else if t >= at {
                    StopAction::Stop
                } else {
                    StopAction::Continue
                };
                (Some(p), action)
            }
        };

        let next_location = if action == StopAction::Continue {
            Some(locate(&h, params, config.location_sigma, location_mode, rng))
        } else {
            None
        };

        let observed_at = loc;
        if let Some(s) = &next_location {
            loc = s.location;
        }
        h_prev.copy_from_slice(h.data());
        steps.push(StepRecord {
            observed_at,
            glimpse_input: x,
            glimpse_hidden: gh,
            h,
            class_probs,
            stop_prob,
            stop_action: action,
            next_location,
        });
        if action != StopAction::Continue {
            break;
        }
    }
    Trajectory { steps }
}

/// Runs one episode. Fixed-length unless `config.dynamic`.
pub fn run_episode<R: Rng + ?Sized>(
    image: &ImageGray,
    params: &RamParams,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Trajectory {
    let rule = if config.dynamic {
        StopRule::Learned(mode)
    } else {
        StopRule::FixedLength
    };
    rollout(image, params, config, mode, rule, rng)
}

/// Deterministic greedy episode.
pub fn run_greedy(image: &ImageGray, params: &RamParams, config: &ModelConfig) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    run_episode(image, params, config, Mode::Greedy, &mut rng)
}

/// Greedy fixed-length model that stops as soon as its top class probability
/// reaches `threshold`. The stop head is ignored.
pub fn threshold_policy_episode(
    image: &ImageGray,
    params: &RamParams,
    threshold: f64,
    config: &ModelConfig,
) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    rollout(
        image,
        params,
        config,
        Mode::Greedy,
        StopRule::Confidence(threshold),
        &mut rng,
    )
}
