//! Small end-to-end experiments with fixed configurations: recovery of a
//! bimodal return distribution, the effect of the consistency term on flow
//! straightness, the lower-tail effect of the risk term, and DFPO against a
//! scalar critic under reward noise.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{CriticMode, RunConfig};
use crate::envs::{BimodalBandit, CliffGrid};
use crate::error::{Error, Result};
use crate::flow::{solve_ivp, solve_ivp_recorded, stratified_normal, FlowNet, FlowShape, QuantileDistribution, VectorField};
use crate::losses::{couple, critic_loss_and_grad, Coupling, CriticOptions, CriticSample, LossWeights, TailSpec};
use crate::net::Adam;
use crate::trainer::{train, Trainer};

/// Seed of the noise used to read off predicted distributions.
pub const READOUT_SEED: u64 = 1234;

#[derive(Debug, Clone)]
pub struct RecoveryOutcome {
    pub w1: f64,
    pub near_low: usize,
    pub near_high: usize,
    pub supports: Vec<f64>,
    pub seconds: f64,
}

/// Bandit run used for distribution recovery.
pub fn recovery_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        env: "bimodal-bandit".into(),
        iterations: 600,
        head_hidden: vec![64, 64],
        spectral_norm: false,
        lambda_reg: 0.0,
        critic_lr: 3e-3,
        inference_steps: 20,
        eval_every: 0,
        ..RunConfig::default()
    }
}

/// Train on the bimodal bandit and compare the predicted quantiles with the
/// closed-form mixture quantiles.
pub fn run_recovery(cfg: RunConfig) -> Result<RecoveryOutcome> {
    if cfg.env != "bimodal-bandit" {
        return Err(Error::InvalidArgument("recovery runs on bimodal-bandit".into()));
    }
    let start = Instant::now();
    let (low, high, p) = (cfg.bandit_low, cfg.bandit_high, cfg.bandit_p_high);
    let steps = cfg.inference_steps;
    let out = train(cfg, None, None)?;
    let dist = out.trainer.predict_distribution(&[1.0], steps, READOUT_SEED)?;
    let truth: Vec<f64> = QuantileDistribution::levels(dist.len())
        .into_iter()
        .map(|tau| BimodalBandit::true_quantile(low, high, p, tau))
        .collect();
    let w1 = dist.w1(&QuantileDistribution::new(truth)?)?;
    let near = |m: f64| dist.supports().iter().filter(|x| (*x - m).abs() <= 0.5).count();
    Ok(RecoveryOutcome {
        w1,
        near_low: near(low),
        near_high: near(high),
        supports: dist.supports().to_vec(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct ConsistencyOptions {
    pub seed: u64,
    pub lambda_cons: f64,
    pub coupling: Coupling,
    /// Stop once the running consistency loss drops below this.
    pub tol: f64,
    pub max_updates: usize,
    pub batch: usize,
    pub lr: f64,
    pub head_hidden: Vec<usize>,
    pub trajectories: usize,
}

impl Default for ConsistencyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            lambda_cons: 0.01,
            coupling: Coupling::Quantile,
            tol: 1e-5,
            max_updates: 60_000,
            batch: 64,
            lr: 3e-3,
            head_hidden: vec![32, 32],
            trajectories: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConsistencyOutcome {
    pub updates: usize,
    /// Running mean of the consistency term at the end of training.
    pub final_cons: f64,
    pub converged: bool,
    /// Largest `|v(z_t, t) - v(z_0, 0)|` along 50-step trajectories.
    pub velocity_deviation: f64,
    /// Largest gap between 1-step and 50-step terminal values.
    pub step_gap: f64,
}

/// Targets of the fixed-target experiment: 50 quantiles of the -1/+3 mixture.
pub fn bimodal_targets(k: usize) -> Vec<f64> {
    QuantileDistribution::levels(k)
        .into_iter()
        .map(|tau| BimodalBandit::true_quantile(-1.0, 3.0, 0.5, tau))
        .collect()
}

/// Fit a flow head to fixed bimodal targets with the flow-matching and
/// consistency terms only. With `updates = Some(n)` exactly `n` updates run;
/// otherwise training stops at `tol` or `max_updates`.
pub fn run_consistency(opts: &ConsistencyOptions, updates: Option<usize>) -> Result<ConsistencyOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let shape = FlowShape {
        head_hidden: opts.head_hidden.clone(),
        spectral: false,
        ..FlowShape::with_obs_dim(1)
    };
    let mut net = FlowNet::new(shape, &mut rng)?;
    let mut adam = Adam::for_model(&net, opts.lr, 0.9, 0.999);
    let k = 50;
    let targets = bimodal_targets(k);
    let weights = LossWeights {
        reg: 0.0,
        cons: opts.lambda_cons,
        risk: 0.0,
        shape: 0.0,
    };
    let copts = CriticOptions {
        tail: TailSpec::new(0.1, 0.1, k)?,
        risk_steps: 1,
        skip_unused_tail: true,
    };
    let limit = updates.unwrap_or(opts.max_updates);
    let mut running = f64::NAN;
    let mut done = 0;
    let mut converged = false;
    while done < limit {
        let batch: Vec<CriticSample> = (0..opts.batch)
            .map(|_| {
                let x0: f64 = rng.sample(StandardNormal);
                let u: f64 = rng.random();
                CriticSample {
                    obs: vec![1.0],
                    target: targets.clone(),
                    w_conf: 1.0,
                    anchor: Some(0.0),
                    x0,
                    x1: couple(x0, &targets, opts.coupling, u),
                    t: rng.random(),
                    t_cons: rng.random(),
                    risk_noise: Vec::new(),
                }
            })
            .collect();
        let (loss, grads) = critic_loss_and_grad(&net, &batch, &copts, &weights)?;
        if !loss.total.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite {
                what: "consistency experiment loss",
                step: done,
            });
        }
        adam.step(&mut net, &grads)?;
        done += 1;
        running = if running.is_nan() { loss.cons } else { 0.98 * running + 0.02 * loss.cons };
        if updates.is_none() && done >= 200 && running < opts.tol {
            converged = true;
            break;
        }
    }

    let h = net.encode(&[1.0]);
    let mut trng = ChaCha8Rng::seed_from_u64(opts.seed ^ READOUT_SEED);
    let mut velocity_deviation: f64 = 0.0;
    let mut step_gap: f64 = 0.0;
    for z0 in stratified_normal(opts.trajectories, &mut trng) {
        let path = solve_ivp_recorded(&net, z0, &h, 50)?;
        let v0 = net.velocity(z0, 0.0, &h);
        for p in &path {
            velocity_deviation = velocity_deviation.max((p.v - v0).abs());
        }
        let one = solve_ivp(&net, z0, &h, 1)?;
        let fifty = path.last().expect("non-empty path").z;
        step_gap = step_gap.max((one - fifty).abs());
    }
    Ok(ConsistencyOutcome {
        updates: done,
        final_cons: running,
        converged,
        velocity_deviation,
        step_gap,
    })
}

/// Cliff-grid run for the tail experiment with risk weight `lambda_risk`.
pub fn tail_config(seed: u64, lambda_risk: f64) -> RunConfig {
    RunConfig {
        seed,
        env: "cliff-grid".into(),
        iterations: 150,
        rollout_steps: 128,
        head_hidden: vec![32, 32],
        critic_lr: 1e-3,
        lambda_risk,
        eval_every: 0,
        ..RunConfig::default()
    }
}

/// Train and read the 10% quantile predicted at the first risky cell.
pub fn run_tail(cfg: RunConfig) -> Result<f64> {
    let (w, h, steps) = (cfg.grid_width, cfg.grid_height, cfg.inference_steps);
    let out = train(cfg, None, None)?;
    let dist = out
        .trainer
        .predict_distribution(&CliffGrid::risky_observation(w, h), steps, READOUT_SEED)?;
    Ok(dist.quantile(0.1))
}

/// Noisy-chain run for the robustness comparison.
pub fn robustness_config(seed: u64, mode: CriticMode) -> RunConfig {
    RunConfig {
        seed,
        mode,
        env: "noisy-chain".into(),
        flip_rate: 0.3,
        iterations: 2000,
        rollout_steps: 64,
        critic_batch: 64,
        critic_epochs: 2,
        head_hidden: vec![32, 32],
        eval_every: 0,
        ..RunConfig::default()
    }
}

/// Train and return the mean clean return of the final policy.
pub fn run_robustness(cfg: RunConfig) -> Result<f64> {
    let seed = cfg.seed;
    let out = train(cfg, None, None)?;
    Ok(out.trainer.evaluate(crate::ablation::final_eval_seed(seed), false)?.mean_return)
}

/// Train `cfg` to completion in one go and, separately, to half length,
/// checkpoint, reload and finish. Returns whether parameters and metric
/// files agree byte for byte.
pub fn resume_matches(cfg: &RunConfig, dir: &std::path::Path) -> Result<bool> {
    let full_dir = dir.join("full");
    let split_dir = dir.join("split");
    let full = train(cfg.clone(), Some(&full_dir), None)?;
    let mut half = cfg.clone();
    half.iterations = cfg.iterations / 2;
    train(half, Some(&split_dir), None)?;
    let ckpt = crate::checkpoint::Checkpoint::load(&split_dir.join("final.ckpt"))?;
    let resumed = train(cfg.clone(), Some(&split_dir), Some(&ckpt))?;
    let read = |p: std::path::PathBuf| std::fs::read(&p).map_err(|e| Error::io(&p, e));
    let same_metrics = read(full_dir.join("metrics.csv"))? == read(split_dir.join("metrics.csv"))?;
    let same_params = checkpoint_bytes(&full.trainer) == checkpoint_bytes(&resumed.trainer);
    Ok(same_metrics && same_params)
}

fn checkpoint_bytes(t: &Trainer) -> Vec<u8> {
    t.checkpoint().to_bytes()
}
