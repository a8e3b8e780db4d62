//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits nonzero if
//! any criterion fails.
//!
//! Criteria that need trained models read checkpoints from `artifacts/` (override
//! with `DTRAM_ARTIFACTS`) and the MNIST IDX files from `data/mnist` (override with
//! `DTRAM_DATA_DIR`). Missing inputs fail the criterion; nothing is skipped.

use dtram::data::{encode_idx_images, encode_idx_labels, LabeledDataset, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use dtram::glimpse::ImageGray;
use dtram::harness::verify::{self, Check, GRADIENT_TOLERANCE};
use dtram::harness::{self, RunConfig, RunMode, Split, SweepRow};
use dtram::model::{checkpoint, Mode};
use dtram::training::{backward_episode, evaluate, EvalReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const RAM_T5: &str = "ram/stage_T5.ckpt";
const RAM_T7: &str = "ram/stage_T7.ckpt";
const DTRAM_098: &str = "dtram_g098/dtram.ckpt";
const DTRAM_099: &str = "dtram_g099/dtram.ckpt";
const ABLATION_T5: &str = "ram_final_step_only/stage_T5.ckpt";

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn dir_from_env(var: &str, default: &str) -> PathBuf {
    std::env::var_os(var)
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join(default))
}

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

type Criterion = Result<Outcome, String>;

/// Lazily evaluated greedy reports, shared between criteria.
struct Context {
    artifacts: PathBuf,
    test: Result<LabeledDataset, String>,
    reports: Vec<(String, Result<EvalReport, String>)>,
}

impl Context {
    fn new() -> Self {
        let data_dir = dir_from_env("DTRAM_DATA_DIR", "data/mnist");
        let test = harness::load_split(&data_dir, Split::Test, 0)
            .map_err(|e| format!("MNIST test set unavailable ({e})"));
        Self {
            artifacts: dir_from_env("DTRAM_ARTIFACTS", "artifacts"),
            test,
            reports: Vec::new(),
        }
    }

    fn test_set(&self) -> Result<&LabeledDataset, String> {
        self.test.as_ref().map_err(Clone::clone)
    }

    fn report(&mut self, name: &str) -> Result<EvalReport, String> {
        if let Some((_, r)) = self.reports.iter().find(|(n, _)| n == name) {
            return r.clone();
        }
        let r = self.evaluate(name);
        self.reports.push((name.to_string(), r.clone()));
        r
    }

    fn evaluate(&self, name: &str) -> Result<EvalReport, String> {
        let path = self.artifacts.join(name);
        let (params, config) =
            checkpoint::load(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(evaluate(self.test_set()?, &params, &config, Mode::Greedy, 0))
    }
}

fn c1_fixed_length_error(ctx: &mut Context) -> Criterion {
    let t5 = ctx.report(RAM_T5)?;
    let t7 = ctx.report(RAM_T7)?;
    Ok(Outcome::new(
        t5.error_pct() <= 2.5 && t7.error_pct() <= 2.0,
        format!(
            "5-step error {:.2}% (<= 2.5), 7-step error {:.2}% (<= 2.0)",
            t5.error_pct(),
            t7.error_pct()
        ),
    ))
}

fn c2_dynamic_tradeoff(ctx: &mut Context) -> Criterion {
    let base = ctx.report(RAM_T7)?;
    let d98 = ctx.report(DTRAM_098)?;
    let d99 = ctx.report(DTRAM_099)?;
    let ok98 = (2.0..=6.0).contains(&d98.avg_steps()) && d98.error_pct() <= base.error_pct() + 0.7;
    let ok99 = d99.avg_steps() > d98.avg_steps() && d99.error_pct() <= base.error_pct() + 0.4;
    Ok(Outcome::new(
        ok98 && ok99,
        format!(
            "7-step {:.2}%; gamma 0.98: {:.2} steps, {:.2}%; gamma 0.99: {:.2} steps, {:.2}%",
            base.error_pct(),
            d98.avg_steps(),
            d98.error_pct(),
            d99.avg_steps(),
            d99.error_pct()
        ),
    ))
}

fn c3_step_distribution(ctx: &mut Context) -> Criterion {
    let d98 = ctx.report(DTRAM_098)?;
    let total = d98.count as f64;
    let heavy = d98.histogram.iter().filter(|&&c| c as f64 >= 0.05 * total).count();
    let fractions: Vec<String> = d98
        .histogram
        .iter()
        .map(|&c| format!("{:.3}", c as f64 / total))
        .collect();
    Ok(Outcome::new(
        heavy >= 2,
        format!("{heavy} stop times with >= 5% mass; histogram [{}]", fractions.join(", ")),
    ))
}

fn summarize(checks: &[Check]) -> Outcome {
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    let worst = checks.iter().map(|c| c.value).fold(0.0, f64::max);
    Outcome::new(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} checks, worst value {worst:.3e}", checks.len())
        } else {
            format!("failed: {}", failed.join("; "))
        },
    )
}

fn c4_unbiasedness() -> Criterion {
    let checks = verify::unbiasedness_suite(10_000);
    let mut o = summarize(&checks);
    let zs: Vec<String> = checks.iter().map(|c| format!("{}: {:.2}", c.name, c.value)).collect();
    o.detail = format!("{} ({})", o.detail, zs.join(", "));
    Ok(o)
}

fn c5_gradients() -> Criterion {
    let checks = verify::finite_difference_suite(backward_episode);
    let mut o = summarize(&checks);
    o.detail = format!("{} (tolerance {GRADIENT_TOLERANCE:e})", o.detail);
    Ok(o)
}

fn c6_threshold_policy(ctx: &mut Context) -> Criterion {
    let full = ctx.report(RAM_T7)?;
    let test = ctx.test_set()?;
    let path = ctx.artifacts.join(RAM_T7);
    let (_, config) = checkpoint::load(&path).map_err(|e| e.to_string())?;
    let rows: Vec<SweepRow> =
        harness::cmd_sweep_threshold(&path, &harness::DEFAULT_THRESHOLDS, test).map_err(|e| e.to_string())?;
    let monotone = rows.windows(2).all(|w| w[0].avg_steps <= w[1].avg_steps);
    let zero_is_one = rows.iter().any(|r| r.threshold == 0.0 && r.avg_steps == 1.0);
    let t_max = config.max_steps as f64;
    let good = rows
        .iter()
        .filter(|r| r.threshold > 0.0 && r.avg_steps < t_max && r.error_pct <= full.error_pct() + 1.0)
        .min_by(|a, b| a.avg_steps.total_cmp(&b.avg_steps));
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("{}:{:.2}/{:.2}%", r.threshold, r.avg_steps, r.error_pct))
        .collect();
    Ok(Outcome::new(
        monotone && zero_is_one && good.is_some(),
        format!(
            "monotone {monotone}, tau=0 gives 1 step {zero_is_one}, best early stop {}; [{}]",
            good.map_or("none".into(), |r| format!("tau {} at {:.2} steps", r.threshold, r.avg_steps)),
            table.join(" ")
        ),
    ))
}

fn c7_intermediate_supervision(ctx: &mut Context) -> Criterion {
    let with = ctx.report(RAM_T5)?;
    let without = ctx.report(ABLATION_T5)?;
    Ok(Outcome::new(
        with.error_pct() <= without.error_pct(),
        format!(
            "5-step error with every-step supervision {:.2}%, final-step only {:.2}%",
            with.error_pct(),
            without.error_pct()
        ),
    ))
}

fn synthetic_mnist_dir(dir: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut make = |n: usize| {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let label: usize = rng.gen_range(0..10);
            let px: Vec<u8> = (0..28 * 28)
                .map(|i| {
                    let on = (i / 28 + i % 28 + label) % 7 == 0;
                    if on { 200 } else { rng.gen_range(0..40) }
                })
                .collect();
            images.push(ImageGray::from_bytes(28, 28, &px).unwrap());
            labels.push(label);
        }
        (images, labels)
    };
    for (n, img_name, lbl_name) in [(300, TRAIN_IMAGES, TRAIN_LABELS), (50, TEST_IMAGES, TEST_LABELS)] {
        let (images, labels) = make(n);
        std::fs::write(dir.join(img_name), encode_idx_images(&images).unwrap()).unwrap();
        std::fs::write(dir.join(lbl_name), encode_idx_labels(&labels)).unwrap();
    }
}

fn c8_determinism() -> Criterion {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    synthetic_mnist_dir(tmp.path());
    let run = |name: &str| -> Result<Vec<Vec<u8>>, String> {
        let mut cfg = RunConfig::parse("curriculum=1:1,3:1\nvalidation_size=50\nseed=11").unwrap();
        cfg.data_dir = tmp.path().to_path_buf();
        cfg.out_dir = tmp.path().join(name);
        let ram = harness::cmd_train(&cfg, &mut std::io::sink()).map_err(|e| e.to_string())?;
        cfg.mode = RunMode::Dtram;
        cfg.finetune_epochs = 1;
        cfg.init_checkpoint = ram.checkpoints.last().cloned();
        cfg.out_dir = tmp.path().join(format!("{name}-dt"));
        let dt = harness::cmd_train(&cfg, &mut std::io::sink()).map_err(|e| e.to_string())?;
        ram.checkpoints
            .iter()
            .chain(&dt.checkpoints)
            .map(|p| std::fs::read(p).map_err(|e| e.to_string()))
            .collect()
    };
    let a = run("a")?;
    let b = run("b")?;
    let identical = a == b;
    let roundtrip = verify::checkpoint_roundtrip_check(|_| {});
    Ok(Outcome::new(
        identical && roundtrip.passed,
        format!(
            "{} checkpoints from two runs bit-identical: {identical}; round trip bit-exact: {}",
            a.len(),
            roundtrip.passed
        ),
    ))
}

fn main() -> ExitCode {
    let mut ctx = Context::new();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("1 fixed-length RAM test error", c1_fixed_length_error(&mut ctx)),
        ("2 learned-stopping trade-off", c2_dynamic_tradeoff(&mut ctx)),
        ("3 stop-time distribution", c3_step_distribution(&mut ctx)),
        ("4 estimator unbiasedness", c4_unbiasedness()),
        ("5 gradient correctness", c5_gradients()),
        ("6 threshold stopping baseline", c6_threshold_policy(&mut ctx)),
        ("7 intermediate supervision ablation", c7_intermediate_supervision(&mut ctx)),
        ("8 determinism and serialization", c8_determinism()),
    ];
    let mut all = true;
    for (name, result) in criteria {
        let (passed, detail) = match result {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, e),
        };
        all &= passed;
        println!("{} criterion {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
