//! Self-checks behind the `verify` command: contraction of the distributional
//! GAE operator, straight-flow and one-step-exactness properties, the
//! sensitivity-ODE Jacobian against finite differences, and central-difference
//! gradient checks for every network and loss term.
//!
//! Every suite returns a [`SuiteResult`] with the measured margin next to its
//! threshold, so a report is readable without rerunning anything.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::flow::{
    jacobian_sensitivity, solve_ivp, solve_ivp_recorded, FlowNet, FlowShape, VectorField,
};
use crate::gae::{w1_atoms, w1_sorted, AtomDistribution, FunctionalMdp, GaeConfig};
use crate::losses::{
    consistency_pair, critic_objective, risk_loss, shape_loss, CriticOptions, CriticSample, TailSpec,
    TermWeights,
};
use crate::net::{Mlp, ParamGrads, Parameterized};
use crate::policy::{surrogate_objective, Policy, PolicyBatch, PpoConfig, ScalarCritic};

/// Relative error `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:<6} {:>12} {:>12}  detail", "suite", "status", "measured", "threshold")?;
        for s in &self.suites {
            writeln!(
                f,
                "{:<24} {:<6} {:>12.3e} {:>12.3e}  {}",
                s.name,
                if s.passed { "PASS" } else { "FAIL" },
                s.measured,
                s.threshold,
                s.detail
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random instances per suite.
    pub instances: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 0, instances: 100 }
    }
}

/// Run every suite.
pub fn verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let n = opts.instances;
    let s = opts.seed;
    let mut suites = vec![
        contraction_suite(s, 2 * n)?,
        straightness_suite(s, n)?,
        one_step_suite(s, n)?,
        jacobian_suite(s, n)?,
        jacobian_linear_suite(),
    ];
    suites.extend(gradient_suites(s, n)?);
    Ok(VerifyReport { suites })
}

// ---------------------------------------------------------------------------
// Contraction

/// Random pairs of per-state quantile distributions on a random 5-state
/// deterministic MDP. For each pair the sup-over-states Wasserstein distance
/// after the lambda-mixture backup must not exceed `Gamma` times the distance
/// before it. The measured value is the largest observed ratio.
pub fn contraction_suite(seed: u64, pairs: usize) -> Result<SuiteResult> {
    const STATES: usize = 5;
    const K: usize = 50;
    let cfg = GaeConfig::default();
    let gamma_c = cfg.contraction_factor();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0);
    let mut worst = 0.0f64;
    let mut violations = 0;
    for _ in 0..pairs {
        let next = (0..STATES).map(|_| rng.random_range(0..STATES)).collect();
        let reward = (0..STATES).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mdp = FunctionalMdp::new(next, reward)?;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..STATES)
                .map(|_| {
                    let loc: f64 = rng.random_range(-3.0..3.0);
                    let scale: f64 = rng.random_range(0.1..3.0);
                    let mut q: Vec<f64> = (0..K).map(|_| loc + scale * rng.sample::<f64, _>(StandardNormal)).collect();
                    q.sort_by(f64::total_cmp);
                    q
                })
                .collect()
        };
        let (z1, z2) = (draw(&mut rng), draw(&mut rng));
        let before = z1
            .iter()
            .zip(&z2)
            .map(|(a, b)| w1_sorted(a, b))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        let (t1, t2) = (mdp.lambda_operator(&z1, &cfg, 400)?, mdp.lambda_operator(&z2, &cfg, 400)?);
        let after = t1.iter().zip(&t2).map(|(a, b)| w1_atoms(a, b)).fold(0.0, f64::max);
        if after > gamma_c * before + 1e-9 {
            violations += 1;
        }
        if before > 0.0 {
            worst = worst.max(after / before);
        }
    }
    Ok(SuiteResult {
        name: "contraction".into(),
        passed: violations == 0,
        measured: worst,
        threshold: gamma_c,
        detail: format!("{pairs} pairs, {STATES} states, K={K}, {violations} violations"),
    })
}

/// Exact sup-state contraction check used by tests with explicit inputs.
pub fn backup_distance(mdp: &FunctionalMdp, z1: &[Vec<f64>], z2: &[Vec<f64>], cfg: &GaeConfig) -> Result<(f64, f64)> {
    let before = z1
        .iter()
        .zip(z2)
        .map(|(a, b)| w1_atoms(&AtomDistribution::from_quantiles(a), &AtomDistribution::from_quantiles(b)))
        .fold(0.0, f64::max);
    let (t1, t2) = (mdp.lambda_operator(z1, cfg, 400)?, mdp.lambda_operator(z2, cfg, 400)?);
    let after = t1.iter().zip(&t2).map(|(a, b)| w1_atoms(a, b)).fold(0.0, f64::max);
    Ok((before, after))
}

// ---------------------------------------------------------------------------
// Straight and curved reference fields

/// Field whose trajectories are the straight lines `z_t = x0 + t (a x0 + b)`.
#[derive(Debug, Clone, Copy)]
pub struct StraightField {
    pub a: f64,
    pub b: f64,
}

impl StraightField {
    pub fn endpoint(&self, x0: f64) -> f64 {
        x0 + self.a * x0 + self.b
    }
}

impl VectorField for StraightField {
    fn velocity(&self, z: f64, t: f64, _: &[f64]) -> f64 {
        self.a * (z - self.b * t) / (1.0 + self.a * t) + self.b
    }

    fn velocity_and_dz(&self, z: f64, t: f64, h: &[f64]) -> (f64, f64) {
        (self.velocity(z, t, h), self.a / (1.0 + self.a * t))
    }
}

/// A field with bent trajectories, used as the negative control.
#[derive(Debug, Clone, Copy)]
pub struct CurvedField;

impl VectorField for CurvedField {
    fn velocity(&self, z: f64, t: f64, _: &[f64]) -> f64 {
        (2.0 * z).sin() + t
    }

    fn velocity_and_dz(&self, z: f64, t: f64, h: &[f64]) -> (f64, f64) {
        (self.velocity(z, t, h), 2.0 * (2.0 * z).cos())
    }
}

/// `max_t |v(z_t, t) - v(z_0, 0)|` along a recorded Euler trajectory.
pub fn velocity_deviation<F: VectorField + ?Sized>(field: &F, z0: f64, h: &[f64], steps: usize) -> Result<f64> {
    let path = solve_ivp_recorded(field, z0, h, steps)?;
    let v0 = path[0].v;
    Ok(path.iter().map(|p| (p.v - v0).abs()).fold(0.0, f64::max))
}

/// A field with zero consistency residual on its own trajectories has
/// constant velocity along them; a curved field shows both a residual and
/// a velocity drift.
pub fn straightness_suite(seed: u64, instances: usize) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57);
    let mut straight_cons = 0.0f64;
    let mut straight_dev = 0.0f64;
    let mut curved_cons = 0.0f64;
    let mut curved_dev = 0.0f64;
    for _ in 0..instances {
        let field = StraightField {
            a: rng.random_range(-0.5..2.0),
            b: rng.random_range(-2.0..2.0),
        };
        let x0: f64 = rng.sample(StandardNormal);
        let t: f64 = rng.random();
        straight_cons = straight_cons.max(consistency_pair(&field, &[], x0, field.endpoint(x0), t));
        straight_dev = straight_dev.max(velocity_deviation(&field, x0, &[], 50)?);
        let x1 = solve_ivp(&CurvedField, x0, &[], 200)?;
        curved_cons = curved_cons.max(consistency_pair(&CurvedField, &[], x0, x1, t));
        curved_dev = curved_dev.max(velocity_deviation(&CurvedField, x0, &[], 50)?);
    }
    let tol = 1e-2;
    Ok(SuiteResult {
        name: "straightness".into(),
        passed: straight_cons < 1e-20 && straight_dev < 1e-10 && curved_dev > tol && curved_cons > 1e-6,
        measured: straight_dev,
        threshold: tol,
        detail: format!(
            "straight: cons {straight_cons:.1e}; curved control: drift {curved_dev:.2}, cons {curved_cons:.1e}"
        ),
    })
}

/// On straight fields one Euler step lands exactly where fifty do, and on
/// the exact endpoint.
pub fn one_step_suite(seed: u64, instances: usize) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x15);
    let mut worst = 0.0f64;
    let mut curved_gap = 0.0f64;
    for _ in 0..instances {
        let field = StraightField {
            a: rng.random_range(-0.5..2.0),
            b: rng.random_range(-2.0..2.0),
        };
        let x0: f64 = rng.sample(StandardNormal);
        let one = solve_ivp(&field, x0, &[], 1)?;
        let fifty = solve_ivp(&field, x0, &[], 50)?;
        let exact = field.endpoint(x0);
        worst = worst.max((one - fifty).abs()).max((one - exact).abs());
        curved_gap = curved_gap.max((solve_ivp(&CurvedField, x0, &[], 1)? - solve_ivp(&CurvedField, x0, &[], 50)?).abs());
    }
    let tol = 1e-10;
    Ok(SuiteResult {
        name: "one-step-exactness".into(),
        passed: worst < tol && curved_gap > 1e-2,
        measured: worst,
        threshold: tol,
        detail: format!("{instances} straight fields; curved control gap {curved_gap:.2}"),
    })
}

// ---------------------------------------------------------------------------
// Jacobian oracle

/// Small flow net used by the randomized suites. Weights are inflated so the
/// spectral scale is active when normalization is on.
pub fn tiny_flow_net(rng: &mut ChaCha8Rng, spectral: bool) -> Result<FlowNet> {
    let shape = FlowShape {
        obs_dim: 3,
        state_dim: 4,
        encoder_hidden: vec![6],
        time_embed_dim: 4,
        time_hidden: 6,
        time_out: 3,
        head_hidden: vec![8, 8],
        spectral,
        time_max_freq: 100.0,
    };
    let mut net = FlowNet::new(shape, rng)?;
    let gain: f64 = rng.random_range(1.0..3.0);
    for p in net.params_mut() {
        p.iter_mut().for_each(|w| *w *= gain);
    }
    net.refresh();
    net.power_iterate(3);
    Ok(net)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `J(1)` from the sensitivity ODE against a central difference of the
/// Euler map on the same grid, over random networks.
pub fn jacobian_suite(seed: u64, nets: usize) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1A);
    let steps = 10;
    let mut worst = 0.0f64;
    for i in 0..nets {
        let net = tiny_flow_net(&mut rng, i % 2 == 0)?;
        let h = normal_vec(&mut rng, 4);
        let z0: f64 = rng.sample(StandardNormal);
        let j = jacobian_sensitivity(&net, z0, &h, steps)?.jacobian[steps];
        let eps = 1e-5;
        let fd = (solve_ivp(&net, z0 + eps, &h, steps)? - solve_ivp(&net, z0 - eps, &h, steps)?) / (2.0 * eps);
        worst = worst.max(rel_err(j, fd));
    }
    let tol = 1e-6;
    Ok(SuiteResult {
        name: "jacobian-fd".into(),
        passed: worst < tol,
        measured: worst,
        threshold: tol,
        detail: format!("{nets} random nets, {steps} steps"),
    })
}

/// Linear field `v = a z`: the Euler sensitivity is `(1 + a/N)^N`.
pub fn jacobian_linear_suite() -> SuiteResult {
    struct Linear(f64);
    impl VectorField for Linear {
        fn velocity(&self, z: f64, _: f64, _: &[f64]) -> f64 {
            self.0 * z
        }
        fn velocity_and_dz(&self, z: f64, _: f64, _: &[f64]) -> (f64, f64) {
            (self.0 * z, self.0)
        }
    }
    let mut worst = 0.0f64;
    for &a in &[-2.0, -0.5, 0.0, 0.3, 1.0, 2.5] {
        for &n in &[1usize, 2, 5, 10, 50] {
            let exact = (1.0 + a / n as f64).powi(n as i32);
            let j = jacobian_sensitivity(&Linear(a), 0.7, &[], n).map(|t| t.jacobian[n]).unwrap_or(f64::NAN);
            worst = worst.max((j - exact).abs() / exact.abs().max(1.0));
        }
    }
    let tol = 1e-12;
    SuiteResult {
        name: "jacobian-linear".into(),
        passed: worst < tol,
        measured: worst,
        threshold: tol,
        detail: "(1 + a/N)^N for 6 slopes x 5 step counts".into(),
    }
}

// ---------------------------------------------------------------------------
// Gradient checks

/// Outcome of comparing analytic and numeric derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradStats {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates skipped because a kink (ReLU, sort order, clipping) lies
    /// within the difference stencil.
    pub skipped: usize,
}

impl GradStats {
    fn record(&mut self, analytic: f64, numeric: Option<f64>) {
        match numeric {
            Some(n) => {
                self.max_rel = self.max_rel.max(rel_err(analytic, n));
                self.checked += 1;
            }
            None => self.skipped += 1,
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel < GRAD_TOL && self.skipped * 20 <= self.checked
    }
}

/// Central difference with step `FD_STEP`, cross-checked against half the
/// step. Returns `None` when the two disagree, which happens only when the
/// function is not smooth inside the stencil.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64) -> Option<f64> {
    let d = |f: &mut dyn FnMut(f64) -> f64, h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    let a = d(&mut f, FD_STEP);
    let b = d(&mut f, FD_STEP / 2.0);
    (rel_err(a, b) < 1e-5).then_some(a)
}

/// Numeric derivative of `f(model)` in parameter `(array, idx)`. The model
/// is restored afterwards.
pub fn param_difference<M: Parameterized>(
    model: &mut M,
    array: usize,
    idx: usize,
    f: &dyn Fn(&M) -> f64,
) -> Option<f64> {
    let orig = model.params()[array][idx];
    let out = central_difference(
        |x| {
            model.params_mut()[array][idx] = x;
            model.refresh();
            f(model)
        },
        orig,
    );
    model.params_mut()[array][idx] = orig;
    model.refresh();
    out
}

/// Compare `analytic` with numeric derivatives of `f` on `coords` random
/// parameter coordinates (all of them when the model is smaller).
pub fn check_params<M: Parameterized>(
    model: &mut M,
    analytic: &ParamGrads,
    f: &dyn Fn(&M) -> f64,
    coords: usize,
    rng: &mut ChaCha8Rng,
    stats: &mut GradStats,
) {
    let shapes = model.param_shapes();
    let all: Vec<(usize, usize)> = shapes
        .iter()
        .enumerate()
        .flat_map(|(a, &n)| (0..n).map(move |i| (a, i)))
        .collect();
    let picks: Vec<(usize, usize)> = if all.len() <= coords {
        all
    } else {
        (0..coords).map(|_| all[rng.random_range(0..all.len())]).collect()
    };
    for (a, i) in picks {
        let numeric = param_difference(model, a, i, f);
        stats.record(analytic.arrays[a][i], numeric);
    }
}

fn grad_result(name: &str, stats: GradStats, instances: usize) -> SuiteResult {
    SuiteResult {
        name: format!("grad/{name}"),
        passed: stats.passed(),
        measured: stats.max_rel,
        threshold: GRAD_TOL,
        detail: format!(
            "{instances} instances, {} coordinates, {} skipped at kinks",
            stats.checked, stats.skipped
        ),
    }
}

const COORDS: usize = 24;

/// Random MLP, spectral normalization on for even instances.
pub fn mlp_gradient_check(seed: u64, instances: usize) -> Result<GradStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x31);
    let mut stats = GradStats::default();
    for i in 0..instances {
        let sizes = [
            rng.random_range(1..5),
            rng.random_range(2..8),
            rng.random_range(2..8),
            rng.random_range(1..4),
        ];
        let mut mlp = Mlp::new(&sizes, i % 2 == 0, &mut rng)?;
        let gain: f64 = rng.random_range(1.0..3.0);
        for p in mlp.params_mut() {
            p.iter_mut().for_each(|w| *w *= gain);
        }
        mlp.refresh();
        mlp.power_iterate(2);
        let x = normal_vec(&mut rng, sizes[0]);
        let up = normal_vec(&mut rng, sizes[3]);
        let (_, grads, dx) = mlp.forward_backward(&x, &up)?;
        let f = |m: &Mlp| m.forward(&x).iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        check_params(&mut mlp, &grads, &f, COORDS, &mut rng, &mut stats);
        for (j, &g) in dx.iter().enumerate() {
            let n = central_difference(
                |v| {
                    let mut xx = x.clone();
                    xx[j] = v;
                    mlp.forward(&xx).iter().zip(&up).map(|(a, b)| a * b).sum()
                },
                x[j],
            );
            stats.record(g, n);
        }
    }
    Ok(stats)
}

/// One field evaluation of the flow net: parameters, `z` and `h`.
pub fn field_gradient_check(seed: u64, instances: usize) -> Result<GradStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF1);
    let mut stats = GradStats::default();
    for i in 0..instances {
        let mut net = tiny_flow_net(&mut rng, i % 2 == 0)?;
        let h = normal_vec(&mut rng, 4);
        let z: f64 = rng.sample(StandardNormal);
        let t: f64 = rng.random();
        let dv: f64 = rng.sample(StandardNormal);
        let trace = net.field_trace(z, t, &h);
        let mut grads = net.zero_grads();
        let mut dh = vec![0.0; 4];
        let dz = net.field_backward(&trace, dv, &mut grads, &mut dh);
        net.finalize_grads(&mut grads);
        let f = |n: &FlowNet| dv * n.velocity(z, t, &h);
        check_params(&mut net, &grads, &f, COORDS, &mut rng, &mut stats);
        stats.record(dz, central_difference(|x| dv * net.velocity(x, t, &h), z));
        for (j, &g) in dh.iter().enumerate() {
            let n = central_difference(
                |x| {
                    let mut hh = h.clone();
                    hh[j] = x;
                    dv * net.velocity(z, t, &hh)
                },
                h[j],
            );
            stats.record(g, n);
        }
    }
    Ok(stats)
}

/// Many particles sharing `(t, h)` through the batched path.
pub fn particle_gradient_check(seed: u64, instances: usize) -> Result<GradStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB7);
    let mut stats = GradStats::default();
    for i in 0..instances {
        let mut net = tiny_flow_net(&mut rng, i % 2 == 1)?;
        let h = normal_vec(&mut rng, 4);
        let zs = normal_vec(&mut rng, 7);
        let t: f64 = rng.random();
        let dv = normal_vec(&mut rng, 7);
        let trace = net.particle_trace(&zs, t, &h);
        let mut grads = net.zero_grads();
        let mut dh = vec![0.0; 4];
        net.particle_backward(&trace, &dv, &mut grads, &mut dh);
        net.finalize_grads(&mut grads);
        let f = |n: &FlowNet| zs.iter().zip(&dv).map(|(&z, g)| g * n.velocity(z, t, &h)).sum::<f64>();
        check_params(&mut net, &grads, &f, COORDS, &mut rng, &mut stats);
        for (j, &g) in dh.iter().enumerate() {
            let n = central_difference(
                |x| {
                    let mut hh = h.clone();
                    hh[j] = x;
                    zs.iter().zip(&dv).map(|(&z, g)| g * net.velocity(z, t, &hh)).sum()
                },
                h[j],
            );
            stats.record(g, n);
        }
    }
    Ok(stats)
}

/// Random critic minibatch for the tiny net: `K = 20`, tails of 20%.
pub fn random_critic_batch(rng: &mut ChaCha8Rng, size: usize, fixed_anchor: bool) -> (Vec<CriticSample>, TailSpec) {
    let k = 20;
    let spec = TailSpec::new(0.2, 0.2, k).expect("valid tail spec");
    let batch = (0..size)
        .map(|_| {
            let mut target: Vec<f64> = normal_vec(rng, k).into_iter().map(|x| 2.0 * x).collect();
            target.sort_by(f64::total_cmp);
            let x0: f64 = rng.sample(StandardNormal);
            CriticSample {
                obs: normal_vec(rng, 3),
                x1: target[rng.random_range(0..k)],
                target,
                w_conf: rng.random_range(1.0..1.5),
                anchor: fixed_anchor.then(|| rng.sample(StandardNormal)),
                x0,
                t: rng.random_range(0.02..0.98),
                t_cons: rng.random_range(0.02..0.98),
                risk_noise: normal_vec(rng, k),
            }
        })
        .collect();
    (batch, spec)
}

/// One loss term of the critic objective through the full network,
/// encoder included. `risk_steps > 1` differentiates through an unrolled
/// solve.
pub fn loss_term_gradient_check(term: &str, risk_steps: usize, seed: u64, instances: usize) -> Result<GradStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7E ^ (risk_steps as u64) << 8 ^ term.len() as u64);
    let weights = TermWeights::only(term)?;
    let mut stats = GradStats::default();
    for i in 0..instances {
        let mut net = tiny_flow_net(&mut rng, i % 2 == 0)?;
        let (batch, tail) = random_critic_batch(&mut rng, 2, true);
        let opts = CriticOptions {
            tail,
            risk_steps,
            skip_unused_tail: false,
        };
        let (_, grads) = critic_objective(&net, &batch, &opts, &weights, true)?;
        let grads = grads.expect("gradients requested");
        let f = |n: &FlowNet| {
            let (c, _) = critic_objective(n, &batch, &opts, &weights, false).expect("objective");
            weights.combine(&c)
        };
        check_params(&mut net, &grads, &f, COORDS, &mut rng, &mut stats);
    }
    Ok(stats)
}

/// Input gradients of the risk and shape losses on unsorted-free random
/// sorted vectors.
pub fn tail_loss_input_check(seed: u64, instances: usize) -> Result<(GradStats, GradStats)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x44);
    let (mut risk, mut shape) = (GradStats::default(), GradStats::default());
    for _ in 0..instances {
        let k = rng.random_range(10..60);
        let spec = TailSpec::new(rng.random_range(0.05..0.3), rng.random_range(0.05..0.3), k)?;
        let mut pred = normal_vec(&mut rng, k);
        pred.sort_by(f64::total_cmp);
        let mut tgt = normal_vec(&mut rng, k);
        tgt.sort_by(f64::total_cmp);
        let (_, gr) = risk_loss(&pred, &tgt, &spec)?;
        let (_, gs) = shape_loss(&pred, &spec)?;
        for j in 0..k {
            let at = |x: f64| {
                let mut p = pred.clone();
                p[j] = x;
                p
            };
            risk.record(gr[j], central_difference(|x| risk_loss(&at(x), &tgt, &spec).expect("risk").0, pred[j]));
            shape.record(gs[j], central_difference(|x| shape_loss(&at(x), &spec).expect("shape").0, pred[j]));
        }
    }
    Ok((risk, shape))
}

/// Clipped surrogate plus entropy through the policy network.
pub fn policy_gradient_check(seed: u64, instances: usize) -> Result<GradStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9C);
    let mut stats = GradStats::default();
    let cfg = PpoConfig::default();
    for _ in 0..instances {
        let mut policy = Policy::new(3, &[8], 3, &mut rng)?;
        let obs: Vec<Vec<f64>> = (0..4).map(|_| normal_vec(&mut rng, 3)).collect();
        let actions: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let old_log_probs = obs
            .iter()
            .zip(&actions)
            .map(|(o, &a)| policy.output(o).log_prob(a) + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let batch = PolicyBatch {
            obs,
            actions,
            old_log_probs,
            advantages: normal_vec(&mut rng, 4),
        };
        let (_, grads) = surrogate_objective(&policy, &batch, &cfg)?;
        let f = |p: &Policy| -surrogate_objective(p, &batch, &cfg).expect("surrogate").0.objective;
        check_params(&mut policy, &grads, &f, COORDS, &mut rng, &mut stats);
    }
    Ok(stats)
}

/// Mean squared error of the scalar critic.
pub fn scalar_critic_gradient_check(seed: u64, instances: usize) -> Result<GradStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5C);
    let mut stats = GradStats::default();
    for _ in 0..instances {
        let mut critic = ScalarCritic::new(3, &[8, 8], &mut rng)?;
        let obs: Vec<Vec<f64>> = (0..5).map(|_| normal_vec(&mut rng, 3)).collect();
        let targets = normal_vec(&mut rng, 5);
        let (_, grads) = critic.loss_and_grad(&obs, &targets)?;
        let f = |c: &ScalarCritic| c.loss_and_grad(&obs, &targets).expect("mse").0;
        check_params(&mut critic, &grads, &f, COORDS, &mut rng, &mut stats);
    }
    Ok(stats)
}

/// Every gradient suite.
pub fn gradient_suites(seed: u64, instances: usize) -> Result<Vec<SuiteResult>> {
    let n = instances;
    let mut out = vec![
        grad_result("mlp", mlp_gradient_check(seed, n)?, n),
        grad_result("flow-field", field_gradient_check(seed, n)?, n),
        grad_result("flow-particles", particle_gradient_check(seed, n)?, n),
    ];
    for term in ["udcfm", "bcfm", "cons", "risk", "shape"] {
        out.push(grad_result(term, loss_term_gradient_check(term, 1, seed, n)?, n));
    }
    out.push(grad_result("risk-solved", loss_term_gradient_check("risk", 3, seed, n)?, n));
    let (risk, shape) = tail_loss_input_check(seed, n)?;
    out.push(grad_result("risk-input", risk, n));
    out.push(grad_result("shape-input", shape, n));
    out.push(grad_result("policy", policy_gradient_check(seed, n)?, n));
    out.push(grad_result("scalar-critic", scalar_critic_gradient_check(seed, n)?, n));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_field_endpoint_matches_fine_solve() {
        let f = StraightField { a: 0.7, b: -0.4 };
        let fine = solve_ivp(&f, 1.3, &[], 1000).unwrap();
        assert!((fine - f.endpoint(1.3)).abs() < 1e-12);
    }

    #[test]
    fn central_difference_flags_kinks() {
        assert!(central_difference(|x: f64| x.abs(), 1e-6).is_none());
        let d = central_difference(|x: f64| x * x * x, 2.0).unwrap();
        assert!((d - 12.0).abs() < 1e-8);
    }

    #[test]
    fn report_lists_every_suite() {
        let report = VerifyReport {
            suites: vec![jacobian_linear_suite()],
        };
        assert!(report.all_passed());
        assert!(report.to_string().contains("jacobian-linear"));
    }
}
