//! Self-checks run by `dtram verify`.
//!
//! Each suite returns a list of named checks with a measured value and the bound it
//! was held to. Suites take their collaborators as arguments where a fault
//! injection test needs to swap one out.

use crate::glimpse::{extract_glimpse, location_to_pixel, ImageGray, Location};
use crate::model::checkpoint;
use crate::model::{init_params, rollout, run_episode, Mode, ModelConfig, RamParams, StopRule, Trajectory, STOP_UNIT};
use crate::numerics::{
    affine_backward_accumulate, affine_forward, cross_entropy_loss, dot, finite_difference_check, relu_backward,
    relu_forward, softmax, ParamSet, Parameter, Tensor,
};
use crate::training::{
    backward_episode, collect_grads, discounted_reward, episode_gradient, exact_expected_gradient,
    structure_logprob, BaselineState, Supervision,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Maximum relative error tolerated by the gradient checks.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Standard errors allowed between Monte Carlo and exact gradients.
pub const UNBIASED_SE_BOUND: f64 = 3.0;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(suite: &'static str, name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            value,
            bound,
            passed: value <= bound,
        }
    }
}

/// Signature of the episode reverse pass, so the gradient suites can be pointed
/// at a deliberately broken implementation.
pub type BackwardFn = fn(&mut RamParams, &Trajectory, usize, f64, Supervision, f64);

pub fn tiny_model_config(dynamic: bool, location_sigma: f64) -> ModelConfig {
    ModelConfig {
        glimpse_size: 2,
        hidden_dim: 5,
        num_classes: 3,
        max_steps: 3,
        location_sigma,
        dynamic,
    }
}

pub fn random_image(seed: u64, height: usize, width: usize) -> ImageGray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageGray::new(height, width, (0..height * width).map(|_| rng.gen::<f64>()).collect())
        .expect("uniform [0,1) pixels")
}

/// Supervised loss of a replayed episode with the glimpse locations held at
/// `locations`.
pub fn replay_supervised_loss(
    params: &RamParams,
    image: &ImageGray,
    config: &ModelConfig,
    locations: &[Location],
    label: usize,
) -> f64 {
    let mut h = Tensor::zeros(&[config.hidden_dim]);
    let mut loss = 0.0;
    for &l in locations {
        let patch = extract_glimpse(image, l, config.glimpse_size);
        h = crate::model::core_step(&h, &patch, l, params);
        loss += cross_entropy_loss(&crate::model::classify(&h, params), label)
            .expect("label in range")
            .0;
    }
    loss
}

/// `log P(S)` of a recorded episode's actions, recomputed from scratch under `params`.
pub fn replay_logprob(params: &RamParams, image: &ImageGray, config: &ModelConfig, traj: &Trajectory) -> f64 {
    let mut h = Tensor::zeros(&[config.hidden_dim]);
    let mut total = 0.0;
    for s in &traj.steps {
        let patch = extract_glimpse(image, s.observed_at, config.glimpse_size);
        h = crate::model::core_step(&h, &patch, s.observed_at, params);
        if let Some(_) = s.stop_prob {
            let p = crate::model::stop_probability(&h, params);
            match s.stop_action {
                crate::model::StopAction::Continue => total += (1.0 - p).ln(),
                crate::model::StopAction::Stop => total += p.ln(),
                crate::model::StopAction::Forced => {}
            }
        }
        if let Some(ls) = &s.next_location {
            if config.location_sigma > 0.0 {
                let mean = crate::model::location_mean(&h, params);
                total += crate::numerics::gaussian_logpdf(ls.raw, mean, config.location_sigma);
            }
        }
    }
    total
}

fn layer_checks(checks: &mut Vec<Check>) {
    const SUITE: &str = "finite-difference";
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let rand_t = |shape: &[usize], rng: &mut ChaCha8Rng| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let x = rand_t(&[4], &mut rng);
    let dy = rand_t(&[3], &mut rng);
    let mut p = vec![
        Parameter::new(rand_t(&[3, 4], &mut rng)),
        Parameter::new(rand_t(&[3], &mut rng)),
    ];
    {
        let (w, b) = p.split_at_mut(1);
        affine_backward_accumulate(&x, &mut w[0], &mut b[0], &dy).unwrap();
    }
    let err = finite_difference_check(&mut p, 1e-5, |p| {
        dot(affine_forward(&x, &p[0].value, &p[1].value).unwrap().data(), dy.data())
    });
    checks.push(Check::at_most(SUITE, "affine layer", err, GRADIENT_TOLERANCE));

    // relu away from its kink
    let xs: Vec<f64> = (0..8)
        .map(|i| (0.1 + 0.1 * i as f64) * if i % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let mut p = vec![Parameter::new(Tensor::from_vec(xs))];
    let dy = rand_t(&[8], &mut rng);
    p[0].grad = relu_backward(&p[0].value, &dy).unwrap();
    let err = finite_difference_check(&mut p, 1e-5, |p| dot(relu_forward(&p[0].value).data(), dy.data()));
    checks.push(Check::at_most(SUITE, "relu", err, GRADIENT_TOLERANCE));

    // softmax + cross-entropy w.r.t. logits
    let mut p = vec![Parameter::new(rand_t(&[5], &mut rng))];
    p[0].grad = cross_entropy_loss(&softmax(&p[0].value), 3).unwrap().1;
    let err = finite_difference_check(&mut p, 1e-5, |p| cross_entropy_loss(&softmax(&p[0].value), 3).unwrap().0);
    checks.push(Check::at_most(SUITE, "softmax cross-entropy", err, GRADIENT_TOLERANCE));
}

/// Gradient checks for every layer, the full supervised model loss (fixed
/// stopping and fixed locations) and the structure log-probability.
pub fn finite_difference_suite(backward: BackwardFn) -> Vec<Check> {
    const SUITE: &str = "finite-difference";
    let mut checks = Vec::new();
    layer_checks(&mut checks);

    let config = tiny_model_config(false, 0.3);
    let image = random_image(7, 5, 5);
    let params = init_params(&config, 19);
    for (name, supervision) in [
        ("supervised loss, every step", Supervision::EveryStep),
        ("supervised loss, final step", Supervision::FinalStep),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let traj = run_episode(&image, &params, &config, Mode::Sample, &mut rng);
        let locations: Vec<Location> = traj.steps.iter().map(|s| s.observed_at).collect();
        let label = 1;
        let mut g = params.fresh_copy();
        backward(&mut g, &traj, label, 0.0, supervision, 1.0);
        let err = finite_difference_check(&mut g, 1e-5, |q| match supervision {
            Supervision::EveryStep => replay_supervised_loss(q, &image, &config, &locations, label),
            _ => {
                let all = replay_supervised_loss(q, &image, &config, &locations, label);
                let head = replay_supervised_loss(q, &image, &config, &locations[..locations.len() - 1], label);
                all - head
            }
        });
        checks.push(Check::at_most(SUITE, name, err, GRADIENT_TOLERANCE));
    }

    let config = tiny_model_config(true, 0.3);
    let mut params = init_params(&config, 23);
    params.stop_b.value.data_mut()[STOP_UNIT] = -0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let traj = loop {
        let t = run_episode(&image, &params, &config, Mode::Sample, &mut rng);
        if t.stop_time() == config.max_steps {
            break t;
        }
    };
    let mut g = params.fresh_copy();
    backward(&mut g, &traj, 0, 1.0, Supervision::None, 1.0);
    let err = finite_difference_check(&mut g, 1e-5, |q| replay_logprob(q, &image, &config, &traj));
    checks.push(Check::at_most(SUITE, "structure log-probability", err, GRADIENT_TOLERANCE));
    checks
}

/// Result of comparing the Monte Carlo estimator with exact enumeration.
#[derive(Debug, Clone, Serialize)]
pub struct UnbiasednessResult {
    pub samples: usize,
    pub coordinates: usize,
    /// Largest `|mean - exact| / standard_error` over coordinates with nonzero variance.
    pub max_z: f64,
    /// Largest `|mean - exact|` over zero-variance coordinates.
    pub max_degenerate_gap: f64,
    pub failures: usize,
}

/// The 4x4, two-class, three-step toy problem with deterministic locations.
pub fn toy_problem() -> (ModelConfig, RamParams, ImageGray, usize) {
    let config = ModelConfig {
        glimpse_size: 2,
        hidden_dim: 4,
        num_classes: 2,
        max_steps: 3,
        location_sigma: 0.0,
        dynamic: true,
    };
    let mut params = init_params(&config, 29);
    params.stop_b.value.data_mut()[STOP_UNIT] = -0.4;
    for v in params.loc_w.value.data_mut() {
        *v *= 4.0;
    }
    let image = random_image(31, 4, 4);
    // label the step-1 prediction so that the reward differs across stop times
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let first = rollout(&image, &params, &config, Mode::Greedy, StopRule::Scripted(1), &mut rng);
    let label = first.prediction();
    (config, params, image, label)
}

/// Samples `samples` episodes of the toy problem and compares the mean
/// per-episode gradient with `exact_expected_gradient` coordinate-wise.
pub fn unbiasedness_check(samples: usize, baseline_enabled: bool, seed: u64, gamma: f64) -> UnbiasednessResult {
    let (config, params, image, label) = toy_problem();
    let supervision = Supervision::EveryStep;
    let exact: Vec<f64> = exact_expected_gradient(&params, &image, label, &config, gamma, supervision)
        .expect("deterministic locations")
        .into_iter()
        .flat_map(Tensor::into_data)
        .collect();
    let dim = exact.len();
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut baseline = BaselineState::default();
    let mut batch_reward = 0.0;
    let batch = 20;
    for n in 1..=samples {
        let traj = run_episode(&image, &params, &config, Mode::Sample, &mut rng);
        let reward = discounted_reward(&traj, label, gamma);
        let b = if baseline_enabled { baseline.value } else { 0.0 };
        let mut g = params.fresh_copy();
        episode_gradient(&mut g, &traj, label, reward, b, supervision, 1.0);
        let flat: Vec<f64> = collect_grads(&g).into_iter().flat_map(Tensor::into_data).collect();
        for i in 0..dim {
            let delta = flat[i] - mean[i];
            mean[i] += delta / n as f64;
            m2[i] += delta * (flat[i] - mean[i]);
        }
        batch_reward += reward;
        if n % batch == 0 {
            baseline.update(batch_reward / batch as f64);
            batch_reward = 0.0;
        }
    }
    let mut result = UnbiasednessResult {
        samples,
        coordinates: dim,
        max_z: 0.0,
        max_degenerate_gap: 0.0,
        failures: 0,
    };
    for i in 0..dim {
        let var = m2[i] / (samples as f64 - 1.0);
        let se = (var / samples as f64).sqrt();
        let gap = (mean[i] - exact[i]).abs();
        if se > 1e-12 * (1.0 + exact[i].abs()) {
            let z = gap / se;
            result.max_z = result.max_z.max(z);
            if z > UNBIASED_SE_BOUND {
                result.failures += 1;
            }
        } else {
            result.max_degenerate_gap = result.max_degenerate_gap.max(gap);
            if gap > 1e-9 * (1.0 + exact[i].abs()) {
                result.failures += 1;
            }
        }
    }
    result
}

pub fn unbiasedness_suite(samples: usize) -> Vec<Check> {
    [(false, "without baseline"), (true, "with baseline")]
        .into_iter()
        .map(|(baseline, name)| {
            let r = unbiasedness_check(samples, baseline, 2024, 0.9);
            Check {
                suite: "unbiasedness",
                name: format!("{name}: max z over {} coords", r.coordinates),
                value: r.max_z,
                bound: UNBIASED_SE_BOUND,
                passed: r.failures == 0,
            }
        })
        .collect()
}

/// Checks the structure probabilities of the toy problem sum to one.
pub fn structure_probability_check() -> Check {
    let (config, params, image, _) = toy_problem();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let total: f64 = crate::training::enumerate_structures(&params, &image, &config, &mut rng)
        .iter()
        .map(|(_, p, t)| {
            debug_assert!((p.ln() - structure_logprob(t, 0.0)).abs() < 1e-12);
            *p
        })
        .sum();
    Check::at_most("unbiasedness", "structure probabilities sum to 1", (total - 1.0).abs(), 1e-12)
}

pub fn glimpse_suite() -> Vec<Check> {
    const SUITE: &str = "glimpse";
    let mut checks = Vec::new();
    let cases = [
        (Location::CENTER, (13.5, 13.5)),
        (Location::new(-1.0, -1.0), (0.0, 0.0)),
        (Location::new(1.0, 0.0), (27.0, 13.5)),
    ];
    for (l, expect) in cases {
        let got = location_to_pixel(l, 28, 28);
        let err = (got.0 - expect.0).abs().max((got.1 - expect.1).abs());
        checks.push(Check::at_most(SUITE, format!("pixel of ({}, {})", l.y, l.x), err, 0.0));
    }
    let ramp = ImageGray::new(28, 28, (0..784).map(|i| i as f64 / 784.0).collect()).unwrap();
    let patch = extract_glimpse(&ramp, Location::CENTER, 2);
    let expect = [13 * 28 + 13, 13 * 28 + 14, 14 * 28 + 13, 14 * 28 + 14].map(|i| i as f64 / 784.0);
    let err = patch
        .pixels()
        .data()
        .iter()
        .zip(expect)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    checks.push(Check::at_most(SUITE, "center 2x2 crop on ramp", err, 0.0));
    let ones = ImageGray::new(28, 28, vec![1.0; 784]).unwrap();
    let corner = extract_glimpse(&ones, Location::new(-1.0, -1.0), 8);
    let padded = corner.pixels().data().iter().filter(|&&v| v == 0.0).count();
    checks.push(Check::at_most(
        SUITE,
        "corner crop zero padding (padded pixels - 48)",
        (padded as f64 - 48.0).abs(),
        0.0,
    ));
    checks
}

pub fn reward_suite() -> Vec<Check> {
    const SUITE: &str = "reward";
    let config = ModelConfig {
        max_steps: 5,
        ..tiny_model_config(false, 0.0)
    };
    let params = init_params(&config, 3);
    let traj = crate::model::run_greedy(&random_image(1, 5, 5), &params, &config);
    let right = traj.prediction();
    let wrong = (right + 1) % config.num_classes;
    vec![
        Check::at_most(
            SUITE,
            "correct at T=5, gamma=0.99",
            (discounted_reward(&traj, right, 0.99) - 0.9509900499).abs(),
            1e-10,
        ),
        Check::at_most(SUITE, "incorrect gives 0", discounted_reward(&traj, wrong, 0.99).abs(), 0.0),
        Check::at_most(
            SUITE,
            "gamma=1 gives 1",
            (discounted_reward(&traj, right, 1.0) - 1.0).abs(),
            0.0,
        ),
    ]
}

/// Saves and reloads a checkpoint through the filesystem; `tamper` may modify the
/// bytes on disk in between.
pub fn checkpoint_roundtrip_check(tamper: impl Fn(&mut Vec<u8>)) -> Check {
    let config = ModelConfig {
        location_sigma: 0.15,
        dynamic: true,
        ..tiny_model_config(true, 0.15)
    };
    let params = init_params(&config, 37);
    static NEXT: AtomicUsize = AtomicUsize::new(0);
    let path = std::env::temp_dir().join(format!(
        "dtram-verify-{}-{}.ckpt",
        std::process::id(),
        NEXT.fetch_add(1, Ordering::Relaxed)
    ));
    let outcome = (|| -> Result<bool, checkpoint::CheckpointError> {
        checkpoint::save(&path, &params, &config)?;
        let mut bytes = std::fs::read(&path)?;
        tamper(&mut bytes);
        std::fs::write(&path, &bytes)?;
        let (loaded, loaded_config) = checkpoint::load(&path)?;
        let same_bits = (0..params.num_params()).all(|i| {
            let a = params.param(i).value.data();
            let b = loaded.param(i).value.data();
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        Ok(same_bits && loaded_config == config)
    })();
    let _ = std::fs::remove_file(&path);
    let ok = matches!(outcome, Ok(true));
    Check {
        suite: "checkpoint",
        name: "bit-exact round trip".into(),
        value: if ok { 0.0 } else { 1.0 },
        bound: 0.0,
        passed: ok,
    }
}

/// Every suite with the production implementations.
pub fn run_all() -> Vec<Check> {
    let mut checks = finite_difference_suite(backward_episode);
    checks.extend(unbiasedness_suite(10_000));
    checks.push(structure_probability_check());
    checks.extend(glimpse_suite());
    checks.extend(reward_suite());
    checks.push(checkpoint_roundtrip_check(|_| {}));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn broken_backward(
        params: &mut RamParams,
        traj: &Trajectory,
        label: usize,
        coef: f64,
        supervision: Supervision,
        scale: f64,
    ) {
        backward_episode(params, traj, label, coef, supervision, scale);
        // drop the recurrent bias gradient
        params.core_b.grad.fill(0.0);
    }

    #[test]
    fn finite_difference_suite_passes() {
        for c in finite_difference_suite(backward_episode) {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn broken_backward_is_caught() {
        let checks = finite_difference_suite(broken_backward);
        assert!(checks.iter().any(|c| !c.passed));
    }

    #[test]
    fn corrupted_checkpoint_is_caught() {
        assert!(checkpoint_roundtrip_check(|_| {}).passed);
        assert!(!checkpoint_roundtrip_check(|b| b[40] ^= 0x10).passed);
        assert!(!checkpoint_roundtrip_check(|b| b.truncate(b.len() / 2)).passed);
    }

    #[test]
    fn small_suites_pass() {
        for c in glimpse_suite().into_iter().chain(reward_suite()) {
            assert!(c.passed, "{c:?}");
        }
        assert!(structure_probability_check().passed);
    }
}
