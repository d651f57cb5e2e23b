//! Acceptance checks, one PASS/FAIL line per criterion. Runs without the
//! libtest harness so every line reaches stdout.
//!
//! Failing criteria are reported but do not fail the process, so that
//! `cargo test` still runs the remaining test targets. Set
//! `VALUEFLOW_STRICT_ACCEPTANCE=1` to exit nonzero on any failure.

use std::process::ExitCode;
use std::time::Instant;

use valueflow::config::{CriticMode, RunConfig};
use valueflow::experiments::{
    recovery_config, resume_matches, robustness_config, run_consistency, run_recovery, run_robustness, run_tail,
    tail_config, ConsistencyOptions,
};
use valueflow::gae::GaeConfig;
use valueflow::trainer::train;
use valueflow::verify::{contraction_suite, gradient_suites, jacobian_linear_suite, jacobian_suite};

const SEEDS: u64 = 5;

struct Line {
    name: &'static str,
    passed: bool,
    detail: String,
    seconds: f64,
    budget: f64,
}

fn run(name: &'static str, budget: f64, body: impl FnOnce() -> anyhow::Result<(bool, String)>) -> Line {
    let start = Instant::now();
    let (passed, detail) = match body() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e:#}")),
    };
    let seconds = start.elapsed().as_secs_f64();
    let line = Line {
        name,
        passed: passed && seconds <= budget,
        detail,
        seconds,
        budget,
    };
    let budget = if line.budget.is_finite() { format!(" of {:.0}s", line.budget) } else { String::new() };
    println!(
        "{} {}: {} [{:.1}s{budget}]",
        if line.passed { "PASS" } else { "FAIL" },
        line.name,
        line.detail,
        line.seconds,
    );
    line
}

fn gradient_integrity() -> anyhow::Result<(bool, String)> {
    let suites = gradient_suites(0, 100)?;
    let worst = suites.iter().map(|s| s.measured).fold(0.0, f64::max);
    let failed: Vec<&str> = suites.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect();
    Ok((
        failed.is_empty(),
        format!(
            "{} suites, worst rel. error {worst:.2e} (< 1e-4){}",
            suites.len(),
            if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(", ")) }
        ),
    ))
}

fn contraction() -> anyhow::Result<(bool, String)> {
    let s = contraction_suite(0, 200)?;
    let gamma = GaeConfig::new(0.99, 0.95)?.contraction_factor();
    Ok((s.passed, format!("Gamma {gamma:.4}, {}", s.detail)))
}

fn consistency_chain() -> anyhow::Result<(bool, String)> {
    let opts = ConsistencyOptions::default();
    let on = run_consistency(&opts, None)?;
    let off = run_consistency(
        &ConsistencyOptions {
            lambda_cons: 0.0,
            ..opts.clone()
        },
        Some(on.updates),
    )?;
    let ratio = off.step_gap / on.step_gap.max(f64::MIN_POSITIVE);
    let passed = on.converged && on.velocity_deviation < 1e-2 && on.step_gap < 1e-2 && ratio >= 10.0;
    Ok((
        passed,
        format!(
            "cons {:.2e} after {} updates (target < 1e-5), velocity deviation {:.3e} (< 1e-2), \
             1-vs-50-step gap {:.3e} (< 1e-2); without the term: gap {:.3e}, ratio {ratio:.2} (>= 10)",
            on.final_cons, on.updates, on.velocity_deviation, on.step_gap, off.step_gap
        ),
    ))
}

fn jacobian() -> anyhow::Result<(bool, String)> {
    let fd = jacobian_suite(0, 100)?;
    let lin = jacobian_linear_suite();
    Ok((
        fd.passed && lin.passed,
        format!(
            "finite-difference rel. error {:.2e} (< 1e-6), linear closed form error {:.2e} (< 1e-12)",
            fd.measured, lin.measured
        ),
    ))
}

fn recovery() -> anyhow::Result<(bool, String)> {
    let r = run_recovery(recovery_config(0))?;
    Ok((
        r.w1 < 0.15 && r.near_low >= 10 && r.near_high >= 10,
        format!(
            "W1 {:.4} (< 0.15), {} particles near -1 and {} near +3 (>= 10 each)",
            r.w1, r.near_low, r.near_high
        ),
    ))
}

fn tail() -> anyhow::Result<(bool, String)> {
    let mut diffs = Vec::new();
    for seed in 0..SEEDS {
        let on = run_tail(tail_config(seed, 0.5))?;
        let off = run_tail(tail_config(seed, 0.0))?;
        diffs.push(off - on);
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let lower = diffs.iter().filter(|d| **d > 0.0).count();
    Ok((
        mean > 0.0,
        format!(
            "mean q10 margin (off - on) {mean:.4} (> 0), lower with the constraint in {lower}/{SEEDS} seeds: {}",
            fmt_list(&diffs)
        ),
    ))
}

fn robustness() -> anyhow::Result<(bool, String)> {
    let mut diffs = Vec::new();
    for seed in 0..SEEDS {
        let dfpo = run_robustness(robustness_config(seed, CriticMode::Dfpo))?;
        let scalar = run_robustness(robustness_config(seed, CriticMode::Scalar))?;
        diffs.push(dfpo - scalar);
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    Ok((
        mean > 0.0,
        format!("mean paired clean-return margin (dfpo - scalar) {mean:.4} (> 0): {}", fmt_list(&diffs)),
    ))
}

fn determinism() -> anyhow::Result<(bool, String)> {
    let cfg = RunConfig {
        iterations: 6,
        rollout_steps: 64,
        critic_batch: 64,
        head_hidden: vec![32, 32],
        eval_every: 2,
        eval_episodes: 5,
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir()?;
    let a = train(cfg.clone(), Some(&dir.path().join("a")), None)?;
    let b = train(cfg.clone(), Some(&dir.path().join("b")), None)?;
    let read = |p: &Option<std::path::PathBuf>| std::fs::read(p.as_ref().expect("metrics path"));
    let identical = read(&a.metrics_path)? == read(&b.metrics_path)?;
    let resumed = resume_matches(&cfg, &dir.path().join("resume"))?;
    Ok((
        identical && resumed,
        format!("repeat run metrics identical: {identical}; split-and-resume bit-exact: {resumed}"),
    ))
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

fn main() -> ExitCode {
    let lines = [
        run("gradient integrity", 120.0, gradient_integrity),
        run("GAE contraction", 60.0, contraction),
        run("consistency straightening", 600.0, consistency_chain),
        run("Jacobian oracle", 60.0, jacobian),
        run("distribution recovery", 600.0, recovery),
        run("tail constraint", 900.0, tail),
        run("robustness direction", 1800.0, robustness),
        run("determinism and resume", f64::INFINITY, determinism),
    ];
    let failed = lines.iter().filter(|l| !l.passed).count();
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    let strict = std::env::var_os("VALUEFLOW_STRICT_ACCEPTANCE").is_some_and(|v| v != "0");
    if failed == 0 || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
