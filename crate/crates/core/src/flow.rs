//! The value flow head: a time-conditioned vector field `v(z, t, h)` whose
//! Euler integration from `t = 0` to `t = 1` carries standard-normal noise
//! particles to samples of a state's return distribution.
//!
//! Network layout: a state encoder maps observations to `h`; the flow time is
//! embedded sinusoidally and passed through a small Mish MLP; the head MLP
//! consumes `[z, phi(t), h]` and emits a scalar velocity. Spectral
//! normalization (when enabled) covers the time MLP and the head, not the
//! encoder.

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{check_len, Error, Result};
use crate::net::{Mlp, MlpTrace, ParamGrads, Parameterized, TimeEmbedding};

/// Anything that can act as a scalar velocity field over `(z, t)` given a
/// state embedding.
pub trait VectorField {
    fn velocity(&self, z: f64, t: f64, h: &[f64]) -> f64;
    /// Velocity together with its exact partial derivative in `z`.
    fn velocity_and_dz(&self, z: f64, t: f64, h: &[f64]) -> (f64, f64);
    /// Velocities of many particles at the same `(t, h)`.
    fn velocities(&self, zs: &[f64], t: f64, h: &[f64]) -> Vec<f64> {
        zs.iter().map(|&z| self.velocity(z, t, h)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowShape {
    pub obs_dim: usize,
    pub state_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub time_hidden: usize,
    pub time_out: usize,
    pub head_hidden: Vec<usize>,
    pub spectral: bool,
    pub time_max_freq: f64,
}

impl FlowShape {
    /// Defaults for an observation of size `obs_dim`: two 128-unit head layers.
    pub fn with_obs_dim(obs_dim: usize) -> Self {
        Self {
            obs_dim,
            state_dim: 32,
            encoder_hidden: vec![64],
            time_embed_dim: 16,
            time_hidden: 32,
            time_out: 16,
            head_hidden: vec![128, 128],
            spectral: true,
            time_max_freq: 1e4,
        }
    }
}

/// Point on a flow trajectory: time, position and velocity there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowPoint {
    pub t: f64,
    pub z: f64,
    pub v: f64,
}

/// Validated single evaluation point of the field.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowInput {
    pub z: f64,
    pub t: f64,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowNet {
    shape: FlowShape,
    embedding: TimeEmbedding,
    encoder: Mlp,
    time_mlp: Mlp,
    head: Mlp,
}

/// Forward state of one field evaluation, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct FieldTrace {
    time: MlpTrace,
    head: MlpTrace,
}

impl FieldTrace {
    pub fn velocity(&self) -> f64 {
        self.head.output()[0]
    }
}

/// Forward state of many field evaluations sharing `(t, h)`. The time MLP
/// and the `[phi, h]` part of the head's first layer run once for the whole
/// set.
#[derive(Debug, Clone)]
pub struct ParticleTrace {
    inner: ParticleInner,
}

#[derive(Debug, Clone)]
enum ParticleInner {
    Shared {
        time: MlpTrace,
        /// `[phi(t), h]`, the head input without `z`.
        rest: Vec<f64>,
        zs: Vec<f64>,
        heads: Vec<MlpTrace>,
    },
    // Heads without a hidden layer have nothing to share.
    Each(Vec<FieldTrace>),
}

impl ParticleTrace {
    pub fn velocities(&self) -> Vec<f64> {
        match &self.inner {
            ParticleInner::Shared { heads, .. } => heads.iter().map(|t| t.output()[0]).collect(),
            ParticleInner::Each(traces) => traces.iter().map(FieldTrace::velocity).collect(),
        }
    }
}

impl FlowNet {
    pub fn new<R: Rng + ?Sized>(shape: FlowShape, rng: &mut R) -> Result<Self> {
        let embedding = TimeEmbedding::new(shape.time_embed_dim, shape.time_max_freq)?;
        let mut enc_sizes = vec![shape.obs_dim];
        enc_sizes.extend(&shape.encoder_hidden);
        enc_sizes.push(shape.state_dim);
        let encoder = Mlp::new(&enc_sizes, false, rng)?;
        let time_mlp = Mlp::new(
            &[shape.time_embed_dim, shape.time_hidden, shape.time_out],
            shape.spectral,
            rng,
        )?;
        let mut head_sizes = vec![1 + shape.time_out + shape.state_dim];
        head_sizes.extend(&shape.head_hidden);
        head_sizes.push(1);
        let head = Mlp::new(&head_sizes, shape.spectral, rng)?;
        Ok(Self {
            shape,
            embedding,
            encoder,
            time_mlp,
            head,
        })
    }

    pub fn shape(&self) -> &FlowShape {
        &self.shape
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Mlp {
        &mut self.head
    }

    pub fn time_mlp(&self) -> &Mlp {
        &self.time_mlp
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    /// One power iteration per spectrally normalized layer of the head.
    pub fn power_iterate(&mut self, iters: usize) {
        self.time_mlp.power_iterate(iters);
        self.head.power_iterate(iters);
    }

    fn enc_arrays(&self) -> usize {
        2 * self.encoder.layers().len()
    }

    fn time_arrays(&self) -> usize {
        2 * self.time_mlp.layers().len()
    }

    pub fn encode(&self, obs: &[f64]) -> Vec<f64> {
        self.encoder.forward(obs)
    }

    pub fn try_encode(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.encoder.try_forward(obs)
    }

    pub fn encode_trace(&self, obs: &[f64]) -> MlpTrace {
        self.encoder.forward_trace(obs)
    }

    /// Backpropagate `dh` through the encoder into `grads`.
    pub fn encoder_backward(&self, trace: &MlpTrace, dh: &[f64], grads: &mut ParamGrads) {
        let n = self.enc_arrays();
        self.encoder.backward(trace, dh, &mut grads.arrays[..n]);
    }

    fn head_input(&self, z: f64, phi: &[f64], h: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(1 + phi.len() + h.len());
        x.push(z);
        x.extend_from_slice(phi);
        x.extend_from_slice(h);
        x
    }

    pub fn field_trace(&self, z: f64, t: f64, h: &[f64]) -> FieldTrace {
        let time = self.time_mlp.forward_trace(&self.embedding.embed(t));
        let head = self.head.forward_trace(&self.head_input(z, time.output(), h));
        FieldTrace { time, head }
    }

    /// Backpropagate `dv` from one field evaluation. Parameter gradients go
    /// into `grads`, the state-embedding gradient is added to `dh`, and the
    /// gradient with respect to `z` is returned.
    pub fn field_backward(
        &self,
        trace: &FieldTrace,
        dv: f64,
        grads: &mut ParamGrads,
        dh: &mut [f64],
    ) -> f64 {
        let (e, t) = (self.enc_arrays(), self.time_arrays());
        let dx = self.head.backward(&trace.head, &[dv], &mut grads.arrays[e + t..]);
        let to = self.shape.time_out;
        self.time_mlp
            .backward(&trace.time, &dx[1..1 + to], &mut grads.arrays[e..e + t]);
        for (d, g) in dh.iter_mut().zip(&dx[1 + to..]) {
            *d += g;
        }
        dx[0]
    }

    /// `scale * W0[:, 1..] [phi, h] + b0` for the head's first layer.
    fn shared_pre(&self, rest: &[f64]) -> Vec<f64> {
        let l0 = &self.head.layers()[0];
        let (n_in, s) = (l0.in_dim(), l0.scale());
        let w = l0.weight();
        (0..l0.out_dim())
            .map(|i| s * crate::net::dot(&w[i * n_in + 1..(i + 1) * n_in], rest) + l0.bias()[i])
            .collect()
    }

    fn first_pre(&self, shared: &[f64], z: f64) -> Vec<f64> {
        let l0 = &self.head.layers()[0];
        let (n_in, s) = (l0.in_dim(), l0.scale());
        let w = l0.weight();
        shared.iter().enumerate().map(|(i, c)| s * w[i * n_in] * z + c).collect()
    }

    /// Traced evaluation of every particle in `zs` at the same `(t, h)`.
    pub fn particle_trace(&self, zs: &[f64], t: f64, h: &[f64]) -> ParticleTrace {
        if self.head.layers().len() < 2 {
            let traces = zs.iter().map(|&z| self.field_trace(z, t, h)).collect();
            return ParticleTrace {
                inner: ParticleInner::Each(traces),
            };
        }
        let time = self.time_mlp.forward_trace(&self.embedding.embed(t));
        let mut rest = time.output().to_vec();
        rest.extend_from_slice(h);
        let shared = self.shared_pre(&rest);
        let pre0 = zs.iter().map(|&z| self.first_pre(&shared, z)).collect();
        let heads = self.head.forward_traces_from_first(pre0);
        ParticleTrace {
            inner: ParticleInner::Shared {
                time,
                rest,
                zs: zs.to_vec(),
                heads,
            },
        }
    }

    /// Backpropagate per-particle velocity gradients `dv`. Same contract as
    /// [`FlowNet::field_backward`] except that gradients with respect to the
    /// particles themselves are not formed.
    pub fn particle_backward(&self, trace: &ParticleTrace, dv: &[f64], grads: &mut ParamGrads, dh: &mut [f64]) {
        let (time, rest, zs, heads) = match &trace.inner {
            ParticleInner::Each(traces) => {
                for (tr, &g) in traces.iter().zip(dv) {
                    if g != 0.0 {
                        self.field_backward(tr, g, grads, dh);
                    }
                }
                return;
            }
            ParticleInner::Shared { time, rest, zs, heads } => (time, rest, zs, heads),
        };
        let (e, t) = (self.enc_arrays(), self.time_arrays());
        let head_grads = &mut grads.arrays[e + t..];
        let l0 = &self.head.layers()[0];
        let width = l0.out_dim();
        // The first layer is linear in its input, so the per-particle outer
        // products collapse to sums over particles.
        let mut sum_delta = vec![0.0; width];
        let mut sum_delta_z = vec![0.0; width];
        let mut any = false;
        for ((tr, &g), &z) in heads.iter().zip(dv).zip(zs) {
            if g == 0.0 {
                continue;
            }
            any = true;
            let delta = self.head.backward_above_first(tr, &[g], head_grads);
            for ((a, b), d) in sum_delta.iter_mut().zip(sum_delta_z.iter_mut()).zip(&delta) {
                *a += d;
                *b += d * z;
            }
        }
        if !any {
            return;
        }
        let n_in = l0.in_dim();
        {
            let (gw, gb) = head_grads[..2].split_at_mut(1);
            for i in 0..width {
                let row = &mut gw[0][i * n_in..(i + 1) * n_in];
                row[0] += sum_delta_z[i];
                let d = sum_delta[i];
                if d != 0.0 {
                    for (g, x) in row[1..].iter_mut().zip(rest) {
                        *g += d * x;
                    }
                }
                gb[0][i] += d;
            }
        }
        let dx = l0.backward_input(&sum_delta);
        let to = self.shape.time_out;
        self.time_mlp.backward(time, &dx[1..1 + to], &mut grads.arrays[e..e + t]);
        for (d, g) in dh.iter_mut().zip(&dx[1 + to..]) {
            *d += g;
        }
    }

    /// Convert accumulated effective-weight gradients into parameter gradients.
    pub fn finalize_grads(&self, grads: &mut ParamGrads) {
        let (e, t) = (self.enc_arrays(), self.time_arrays());
        self.encoder.finalize_grads(&mut grads.arrays[..e]);
        self.time_mlp.finalize_grads(&mut grads.arrays[e..e + t]);
        self.head.finalize_grads(&mut grads.arrays[e + t..]);
    }

    /// Checked velocity evaluation.
    pub fn eval_field(&self, input: &FlowInput) -> Result<f64> {
        if !(0.0..=1.0).contains(&input.t) {
            return Err(Error::InvalidArgument(format!(
                "flow time must lie in [0, 1], got {}",
                input.t
            )));
        }
        check_len("state embedding", self.shape.state_dim, input.h.len())?;
        Ok(self.velocity(input.z, input.t, &input.h))
    }
}

impl VectorField for FlowNet {
    fn velocity(&self, z: f64, t: f64, h: &[f64]) -> f64 {
        let phi = self.time_mlp.forward(&self.embedding.embed(t));
        self.head.forward(&self.head_input(z, &phi, h))[0]
    }

    fn velocity_and_dz(&self, z: f64, t: f64, h: &[f64]) -> (f64, f64) {
        let phi = self.time_mlp.forward(&self.embedding.embed(t));
        let trace = self.head.forward_trace(&self.head_input(z, &phi, h));
        let dx = self.head.backward_input(&trace, &[1.0]);
        (trace.output()[0], dx[0])
    }

    fn velocities(&self, zs: &[f64], t: f64, h: &[f64]) -> Vec<f64> {
        if self.head.layers().len() < 2 {
            return zs.iter().map(|&z| self.velocity(z, t, h)).collect();
        }
        let mut rest = self.time_mlp.forward(&self.embedding.embed(t));
        rest.extend_from_slice(h);
        let shared = self.shared_pre(&rest);
        let pre0 = zs.iter().map(|&z| self.first_pre(&shared, z)).collect();
        self.head.forward_many_from_first(pre0).into_iter().map(|v| v[0]).collect()
    }
}

impl Parameterized for FlowNet {
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (prefix, m) in [("encoder", &self.encoder), ("time_mlp", &self.time_mlp), ("head", &self.head)] {
            names.extend(m.param_names().into_iter().map(|n| format!("{prefix}.{n}")));
        }
        names
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.params();
        out.extend(self.time_mlp.params());
        out.extend(self.head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.params_mut();
        out.extend(self.time_mlp.params_mut());
        out.extend(self.head.params_mut());
        out
    }

    fn buffer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (prefix, m) in [("encoder", &self.encoder), ("time_mlp", &self.time_mlp), ("head", &self.head)] {
            names.extend(m.buffer_names().into_iter().map(|n| format!("{prefix}.{n}")));
        }
        names
    }

    fn buffers(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.buffers();
        out.extend(self.time_mlp.buffers());
        out.extend(self.head.buffers());
        out
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = self.encoder.buffers_mut();
        out.extend(self.time_mlp.buffers_mut());
        out.extend(self.head.buffers_mut());
        out
    }

    fn refresh(&mut self) {
        self.encoder.refresh();
        self.time_mlp.refresh();
        self.head.refresh();
    }
}

/// Sorted (ascending) support points of an equal-weight empirical return
/// distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileDistribution {
    supports: Vec<f64>,
}

impl QuantileDistribution {
    pub fn new(supports: Vec<f64>) -> Result<Self> {
        if supports.is_empty() {
            return Err(Error::InvalidArgument("quantile distribution needs at least one support".into()));
        }
        if supports.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument("quantile supports must be sorted ascending".into()));
        }
        Ok(Self { supports })
    }

    /// Stable ascending sort of arbitrary particles.
    pub fn from_unsorted(mut particles: Vec<f64>) -> Self {
        particles.sort_by(|a, b| a.total_cmp(b));
        Self { supports: particles }
    }

    pub fn constant(value: f64, k: usize) -> Self {
        Self {
            supports: vec![value; k],
        }
    }

    pub fn supports(&self) -> &[f64] {
        &self.supports
    }

    pub fn into_supports(self) -> Vec<f64> {
        self.supports
    }

    pub fn len(&self) -> usize {
        self.supports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.supports.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.supports.iter().sum::<f64>() / self.supports.len() as f64
    }

    /// Midpoint quantile levels `(k - 0.5) / K`.
    pub fn levels(k: usize) -> Vec<f64> {
        (1..=k).map(|i| (i as f64 - 0.5) / k as f64).collect()
    }

    /// Linear interpolation between midpoint levels, clamped at the ends.
    pub fn quantile(&self, tau: f64) -> f64 {
        let k = self.supports.len();
        let pos = tau * k as f64 - 0.5;
        if pos <= 0.0 {
            return self.supports[0];
        }
        if pos >= (k - 1) as f64 {
            return self.supports[k - 1];
        }
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        self.supports[i] * (1.0 - frac) + self.supports[i + 1] * frac
    }

    /// Mean absolute difference of paired sorted supports (1-Wasserstein
    /// between equal-weight empirical distributions of equal size).
    pub fn w1(&self, other: &QuantileDistribution) -> Result<f64> {
        check_len("w1 supports", self.len(), other.len())?;
        Ok(self
            .supports
            .iter()
            .zip(&other.supports)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.len() as f64)
    }
}

/// Sensitivity of the terminal particle to its initial noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityTrace {
    /// `J(t_n)` for `n = 0..=steps`; `J(0) = 1`.
    pub jacobian: Vec<f64>,
    pub final_sq_norm: f64,
    pub steps: usize,
}

/// Euler integration of `dz/dt = v(z, t, h)` with uniform step `1/steps`.
pub fn solve_ivp<F: VectorField + ?Sized>(field: &F, z0: f64, h: &[f64], steps: usize) -> Result<f64> {
    if steps == 0 {
        return Err(Error::InvalidArgument("ODE solver needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z0;
    for n in 0..steps {
        z += dt * field.velocity(z, n as f64 * dt, h);
        if !z.is_finite() {
            return Err(Error::NonFinite {
                what: "flow state",
                step: n,
            });
        }
    }
    Ok(z)
}

/// Like [`solve_ivp`] but records `steps + 1` points, including `t = 0` and
/// the velocity at the terminal point.
pub fn solve_ivp_recorded<F: VectorField + ?Sized>(
    field: &F,
    z0: f64,
    h: &[f64],
    steps: usize,
) -> Result<Vec<FlowPoint>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("ODE solver needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z0;
    let mut out = Vec::with_capacity(steps + 1);
    for n in 0..=steps {
        let t = if n == steps { 1.0 } else { n as f64 * dt };
        let v = field.velocity(z, t, h);
        out.push(FlowPoint { t, z, v });
        if n < steps {
            z += dt * v;
            if !z.is_finite() {
                return Err(Error::NonFinite {
                    what: "flow state",
                    step: n,
                });
            }
        }
    }
    Ok(out)
}

/// Integrate every noise particle and sort the terminal values.
pub fn sample_distribution_from_noise<F: VectorField + ?Sized>(
    field: &F,
    h: &[f64],
    noise: &[f64],
    steps: usize,
) -> Result<QuantileDistribution> {
    if noise.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two particles, got {}",
            noise.len()
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("ODE solver needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut zs = noise.to_vec();
    for n in 0..steps {
        let v = field.velocities(&zs, n as f64 * dt, h);
        for (z, v) in zs.iter_mut().zip(v) {
            *z += dt * v;
        }
        if zs.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite {
                what: "flow state",
                step: n,
            });
        }
    }
    Ok(QuantileDistribution::from_unsorted(zs))
}

/// `k` i.i.d. standard-normal particles integrated to `t = 1` and sorted.
pub fn sample_distribution<F: VectorField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    h: &[f64],
    k: usize,
    steps: usize,
    rng: &mut R,
) -> Result<QuantileDistribution> {
    let noise = iid_normal(k, rng);
    sample_distribution_from_noise(field, h, &noise, steps)
}

pub fn iid_normal<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k).map(|_| rng.sample(StandardNormal)).collect()
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Stratified standard-normal draws: particle `i` is `Phi^{-1}(u_i)` with
/// `u_i` uniform on `[(i + e) / k]`, `e ~ U(0, 1)`. Every particle is
/// marginally standard normal once its stratum is chosen at random, and the
/// sample has exactly one point per probability stratum.
pub fn stratified_normal<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let n = std_normal();
    (0..k)
        .map(|i| {
            let u = (i as f64 + rng.random::<f64>()) / k as f64;
            n.inverse_cdf(u.clamp(1e-12, 1.0 - 1e-12))
        })
        .collect()
}

/// Standard-normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

/// Coupled Euler integration of `(z, J)` with `dJ/dt = (dv/dz) J`, `J(0) = 1`.
pub fn jacobian_sensitivity<F: VectorField + ?Sized>(
    field: &F,
    z0: f64,
    h: &[f64],
    steps: usize,
) -> Result<SensitivityTrace> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sensitivity ODE needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z0;
    let mut j = 1.0;
    let mut jacobian = Vec::with_capacity(steps + 1);
    jacobian.push(j);
    for n in 0..steps {
        let (v, dvdz) = field.velocity_and_dz(z, n as f64 * dt, h);
        j += dvdz * j * dt;
        z += v * dt;
        if !j.is_finite() {
            return Err(Error::NonFinite {
                what: "sensitivity jacobian",
                step: n,
            });
        }
        if !z.is_finite() {
            return Err(Error::NonFinite {
                what: "flow state",
                step: n,
            });
        }
        jacobian.push(j);
    }
    Ok(SensitivityTrace {
        final_sq_norm: j * j,
        jacobian,
        steps,
    })
}

/// `sigmoid(|J(1)|^2 / temp) + 0.5`, in `[1, 1.5)`.
pub fn confidence_weight(trace: &SensitivityTrace, temp: f64) -> Result<f64> {
    if temp.is_nan() || temp <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "confidence temperature must be positive, got {temp}"
        )));
    }
    Ok(crate::net::sigmoid(trace.final_sq_norm / temp) + 0.5)
}

/// Per-step traces of an unrolled Euler solve, for backpropagation.
#[derive(Debug, Clone)]
pub struct SolveTrace {
    steps: Vec<FieldTrace>,
    dt: f64,
    terminal: f64,
}

impl SolveTrace {
    pub fn terminal(&self) -> f64 {
        self.terminal
    }
}

/// Euler solve that keeps every step's activations.
pub fn solve_traced(net: &FlowNet, z0: f64, h: &[f64], steps: usize) -> Result<SolveTrace> {
    if steps == 0 {
        return Err(Error::InvalidArgument("ODE solver needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z0;
    let mut traces = Vec::with_capacity(steps);
    for n in 0..steps {
        let tr = net.field_trace(z, n as f64 * dt, h);
        z += dt * tr.velocity();
        if !z.is_finite() {
            return Err(Error::NonFinite {
                what: "flow state",
                step: n,
            });
        }
        traces.push(tr);
    }
    Ok(SolveTrace {
        steps: traces,
        dt,
        terminal: z,
    })
}

/// Reverse sweep through an unrolled Euler solve given `dL/dz_1`. Returns
/// `dL/dz_0`.
pub fn solve_backward(
    net: &FlowNet,
    trace: &SolveTrace,
    dz1: f64,
    grads: &mut ParamGrads,
    dh: &mut [f64],
) -> f64 {
    let mut adj = dz1;
    for tr in trace.steps.iter().rev() {
        let dz = net.field_backward(tr, adj * trace.dt, grads, dh);
        adj += dz;
    }
    adj
}
