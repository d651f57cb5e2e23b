//! Fully connected layer with optional spectral normalization.
//!
//! With spectral normalization enabled the layer keeps a persistent unit
//! vector `v` (input space). The top singular value is estimated as
//! `sigma = |W v|` and the forward pass uses `W / max(sigma, 1)`, so the
//! layer never amplifies by more than the power-iteration estimate allows
//! and is never scaled up. `v` only moves when [`DenseLayer::power_iterate`]
//! is called, which makes the forward pass a pure function of `(W, b, v)`.

use rand::Rng;

use crate::error::{check_len, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    v: Vec<f64>,
    u: Vec<f64>,
    sigma: f64,
}

impl SpectralState {
    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    weight: Vec<f64>,
    bias: Vec<f64>,
    spectral: Option<SpectralState>,
}

/// Dot product with four independent accumulators so the loop pipelines.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() / 4 * 4;
    let mut acc = [0.0f64; 4];
    for (ca, cb) in a[..n].chunks_exact(4).zip(b[..n].chunks_exact(4)) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut tail = 0.0;
    for (x, y) in a[n..].iter().zip(&b[n..]) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl DenseLayer {
    /// Uniform fan-in initialization `U(-1/sqrt(in), 1/sqrt(in))`, zero bias.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, spectral: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let spectral = spectral.then(|| {
            let mut v: Vec<f64> = (0..in_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = norm(&v);
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x /= n);
            } else {
                v[0] = 1.0;
            }
            SpectralState {
                v,
                u: vec![0.0; out_dim],
                sigma: 0.0,
            }
        });
        let mut layer = Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
            spectral,
        };
        layer.refresh();
        layer
    }

    /// Build a layer from explicit parameters. `spectral_v` enables spectral
    /// normalization with the given (normalized here) power-iteration vector.
    pub fn from_parts(
        weight: Vec<f64>,
        bias: Vec<f64>,
        in_dim: usize,
        spectral_v: Option<Vec<f64>>,
    ) -> Result<Self> {
        let out_dim = bias.len();
        check_len("dense weight", in_dim * out_dim, weight.len())?;
        let spectral = match spectral_v {
            Some(mut v) => {
                check_len("spectral vector", in_dim, v.len())?;
                let n = norm(&v);
                if n > 0.0 {
                    v.iter_mut().for_each(|x| *x /= n);
                }
                Some(SpectralState {
                    v,
                    u: vec![0.0; out_dim],
                    sigma: 0.0,
                })
            }
            None => None,
        };
        let mut layer = Self {
            in_dim,
            out_dim,
            weight,
            bias,
            spectral,
        };
        layer.refresh();
        Ok(layer)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn spectral(&self) -> Option<&SpectralState> {
        self.spectral.as_ref()
    }

    pub fn spectral_enabled(&self) -> bool {
        self.spectral.is_some()
    }

    /// Mutable access to `(weight, bias)`. Call [`DenseLayer::refresh`] after
    /// modifying the weight of a spectrally normalized layer.
    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.weight, &mut self.bias)
    }

    pub fn spectral_v_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.spectral.as_mut().map(|s| &mut s.v)
    }

    /// Multiplier applied to the raw weight in the forward pass.
    pub fn scale(&self) -> f64 {
        match &self.spectral {
            Some(s) if s.sigma > 1.0 => 1.0 / s.sigma,
            _ => 1.0,
        }
    }

    /// Recompute `sigma = |W v|` and `u = W v / sigma` from the current state.
    pub fn refresh(&mut self) {
        let (in_dim, weight) = (self.in_dim, &self.weight);
        if let Some(s) = self.spectral.as_mut() {
            for (i, ui) in s.u.iter_mut().enumerate() {
                let row = &weight[i * in_dim..(i + 1) * in_dim];
                *ui = row.iter().zip(&s.v).map(|(w, v)| w * v).sum();
            }
            s.sigma = norm(&s.u);
            if s.sigma > 0.0 {
                let inv = 1.0 / s.sigma;
                s.u.iter_mut().for_each(|x| *x *= inv);
            }
        }
    }

    /// Run `iters` rounds of `u <- W v / |W v|`, `v <- W^T u / |W^T u|`, then refresh.
    pub fn power_iterate(&mut self, iters: usize) {
        let (in_dim, out_dim) = (self.in_dim, self.out_dim);
        let weight = &self.weight;
        let Some(s) = self.spectral.as_mut() else {
            return;
        };
        let mut u = vec![0.0; out_dim];
        let mut v = vec![0.0; in_dim];
        for _ in 0..iters {
            for (i, ui) in u.iter_mut().enumerate() {
                let row = &weight[i * in_dim..(i + 1) * in_dim];
                *ui = row.iter().zip(&s.v).map(|(w, x)| w * x).sum();
            }
            let nu = norm(&u);
            if nu == 0.0 {
                break;
            }
            u.iter_mut().for_each(|x| *x /= nu);
            v.iter_mut().for_each(|x| *x = 0.0);
            for (i, ui) in u.iter().enumerate() {
                let row = &weight[i * in_dim..(i + 1) * in_dim];
                for (vj, w) in v.iter_mut().zip(row) {
                    *vj += w * ui;
                }
            }
            let nv = norm(&v);
            if nv == 0.0 {
                break;
            }
            for (dst, x) in s.v.iter_mut().zip(&v) {
                *dst = x / nv;
            }
        }
        self.refresh();
    }

    /// The weight actually used by the forward pass.
    pub fn effective_weight(&self) -> Vec<f64> {
        let s = self.scale();
        self.weight.iter().map(|w| w * s).collect()
    }

    /// `out = scale * W x + b`.
    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        let s = self.scale();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.weight[i * self.in_dim..(i + 1) * self.in_dim];
            *o = s * dot(row, x) + self.bias[i];
        }
    }

    /// Forward pass for many inputs. Each weight row is read once per block
    /// of four inputs.
    #[allow(clippy::needless_range_loop)]
    pub fn forward_many(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let s = self.scale();
        let mut outs = vec![vec![0.0; self.out_dim]; xs.len()];
        let mut start = 0;
        while start + 4 <= xs.len() {
            let n = self.in_dim;
            let (x0, x1, x2, x3) = (&xs[start][..n], &xs[start + 1][..n], &xs[start + 2][..n], &xs[start + 3][..n]);
            for i in 0..self.out_dim {
                let row = &self.weight[i * n..(i + 1) * n];
                let mut acc = [0.0f64; 4];
                for ((((&w, a), b), c), d) in row.iter().zip(x0).zip(x1).zip(x2).zip(x3) {
                    acc[0] += w * a;
                    acc[1] += w * b;
                    acc[2] += w * c;
                    acc[3] += w * d;
                }
                for (k, a) in acc.iter().enumerate() {
                    outs[start + k][i] = s * a + self.bias[i];
                }
            }
            start += 4;
        }
        for (x, out) in xs[start..].iter().zip(&mut outs[start..]) {
            self.forward_into(x, out);
        }
        outs
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        self.forward_into(x, &mut out);
        out
    }

    /// `dx = scale * W^T upstream`.
    pub fn backward_input(&self, upstream: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        self.backward_input_into(upstream, &mut dx);
        dx
    }

    /// Adds `scale * W^T upstream` to `dx`.
    pub fn backward_input_into(&self, upstream: &[f64], dx: &mut [f64]) {
        let s = self.scale();
        for (i, &g) in upstream.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[i * self.in_dim..(i + 1) * self.in_dim];
            let gs = g * s;
            for (d, w) in dx.iter_mut().zip(row) {
                *d += w * gs;
            }
        }
    }

    /// Accumulate gradients with respect to the *effective* weight and the
    /// bias. Convert with [`DenseLayer::weight_grad_from_effective`] once the
    /// batch is complete.
    pub fn accumulate(&self, x: &[f64], upstream: &[f64], gw: &mut [f64], gb: &mut [f64]) {
        for (i, &g) in upstream.iter().enumerate() {
            gb[i] += g;
            if g == 0.0 {
                continue;
            }
            let row = &mut gw[i * self.in_dim..(i + 1) * self.in_dim];
            for (d, xi) in row.iter_mut().zip(x) {
                *d += g * xi;
            }
        }
    }

    /// Chain rule through `W_eff = W / sigma(W)` with `sigma(W) = |W v|` and
    /// `v` held fixed: `dW = G / sigma - <G, W> / sigma^2 * u v^T`.
    pub fn weight_grad_from_effective(&self, g_eff: &mut [f64]) {
        let Some(s) = &self.spectral else {
            return;
        };
        if s.sigma <= 1.0 {
            return;
        }
        let inner: f64 = g_eff.iter().zip(&self.weight).map(|(g, w)| g * w).sum();
        let inv = 1.0 / s.sigma;
        let coef = inner * inv * inv;
        for i in 0..self.out_dim {
            for j in 0..self.in_dim {
                let g = &mut g_eff[i * self.in_dim + j];
                *g = *g * inv - coef * s.u[i] * s.v[j];
            }
        }
    }
}

/// Run `iters` power iterations on `layer` (updating its persistent state)
/// and return the effective weight `W / max(sigma, 1)`. A zero matrix is
/// returned unchanged.
pub fn spectral_normalize(layer: &mut DenseLayer, iters: usize) -> Result<Vec<f64>> {
    if iters == 0 {
        return Err(crate::Error::InvalidArgument(
            "spectral_normalize needs at least one power iteration".into(),
        ));
    }
    if !layer.spectral_enabled() {
        return Err(crate::Error::InvalidArgument(
            "layer does not have spectral normalization enabled".into(),
        ));
    }
    layer.power_iterate(iters);
    Ok(layer.effective_weight())
}
