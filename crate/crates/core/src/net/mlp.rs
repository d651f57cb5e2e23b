//! Multi-layer perceptron with Mish hidden activations, a linear output layer
//! and hand-written reverse-mode gradients.

use rand::Rng;

use super::activation::{mish_grad_scalar, mish_scalar};
use super::dense::DenseLayer;
use super::grads::ParamGrads;
use crate::error::{check_len, Error, Result};

/// Named access to every trainable array of a model, in a fixed order.
pub trait Parameterized {
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;
    /// Non-trainable persistent state (spectral power-iteration vectors).
    fn buffer_names(&self) -> Vec<String>;
    fn buffers(&self) -> Vec<&[f64]>;
    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>>;
    /// Re-derive cached quantities after parameters or buffers changed.
    fn refresh(&mut self);

    fn param_shapes(&self) -> Vec<usize> {
        self.params().iter().map(|p| p.len()).collect()
    }

    fn zero_grads(&self) -> ParamGrads {
        ParamGrads::zeros_like(&self.param_shapes())
    }

    fn num_params(&self) -> usize {
        self.param_shapes().iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

/// Activations kept from a forward pass for the backward sweep.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl Mlp {
    /// `sizes = [in, hidden..., out]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], spectral: bool, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "mlp needs at least input and output sizes, all positive; got {sizes:?}"
            )));
        }
        let layers = sizes
            .windows(2)
            .map(|w| DenseLayer::new(w[0], w[1], spectral, rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("mlp needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_len("mlp layer chaining", pair[0].out_dim(), pair[1].in_dim())?;
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn power_iterate(&mut self, iters: usize) {
        for l in &mut self.layers {
            l.power_iterate(iters);
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(&cur);
            if i != last {
                z.iter_mut().for_each(|v| *v = mish_scalar(*v));
            }
            cur = z;
        }
        cur
    }

    pub fn try_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("mlp input", self.in_dim(), x.len())?;
        Ok(self.forward(x))
    }

    pub fn forward_trace(&self, x: &[f64]) -> MlpTrace {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&cur);
            inputs.push(cur);
            if i != last {
                cur = z.iter().map(|&v| mish_scalar(v)).collect();
                pre.push(z);
            } else {
                cur = z;
            }
        }
        MlpTrace {
            inputs,
            pre,
            output: cur,
        }
    }

    /// Forward passes that start from given first-layer pre-activations,
    /// for callers that compute the first layer themselves. The returned
    /// traces have no record of the first layer's input, so they must be
    /// backpropagated with [`Mlp::backward_above_first`]. Needs at least two
    /// layers.
    pub fn forward_traces_from_first(&self, pre0: Vec<Vec<f64>>) -> Vec<MlpTrace> {
        debug_assert!(self.layers.len() >= 2);
        let last = self.layers.len() - 1;
        let n = pre0.len();
        let mut inputs: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(self.layers.len()); n];
        let mut pres: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(last); n];
        let mut cur: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (k, p) in pre0.into_iter().enumerate() {
            cur.push(p.iter().map(|&v| mish_scalar(v)).collect());
            inputs[k].push(Vec::new());
            pres[k].push(p);
        }
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            let zs = layer.forward_many(&cur);
            for (k, (x, z)) in std::mem::take(&mut cur).into_iter().zip(zs).enumerate() {
                inputs[k].push(x);
                if i != last {
                    cur.push(z.iter().map(|&v| mish_scalar(v)).collect());
                    pres[k].push(z);
                } else {
                    cur.push(z);
                }
            }
        }
        inputs
            .into_iter()
            .zip(pres)
            .zip(cur)
            .map(|((inputs, pre), output)| MlpTrace { inputs, pre, output })
            .collect()
    }

    /// Output for many inputs given first-layer pre-activations.
    pub fn forward_many_from_first(&self, pre0: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        let last = self.layers.len() - 1;
        let act = |mut v: Vec<f64>| {
            v.iter_mut().for_each(|x| *x = mish_scalar(*x));
            v
        };
        let mut cur: Vec<Vec<f64>> = if last == 0 { pre0 } else { pre0.into_iter().map(act).collect() };
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            let zs = layer.forward_many(&cur);
            cur = if i != last { zs.into_iter().map(act).collect() } else { zs };
        }
        cur
    }

    /// Backward sweep that stops at the first layer's pre-activation: every
    /// layer but the first accumulates into `grads` and the gradient with
    /// respect to the first pre-activation is returned.
    pub fn backward_above_first(&self, trace: &MlpTrace, upstream: &[f64], grads: &mut [Vec<f64>]) -> Vec<f64> {
        debug_assert!(self.layers.len() >= 2);
        let last = self.layers.len() - 1;
        let mut delta = upstream.to_vec();
        for i in (1..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i != last {
                for (d, &z) in delta.iter_mut().zip(&trace.pre[i]) {
                    *d *= mish_grad_scalar(z);
                }
            }
            let (gw, rest) = grads[2 * i..2 * i + 2].split_at_mut(1);
            layer.accumulate(&trace.inputs[i], &delta, &mut gw[0], &mut rest[0]);
            delta = layer.backward_input(&delta);
        }
        for (d, &z) in delta.iter_mut().zip(&trace.pre[0]) {
            *d *= mish_grad_scalar(z);
        }
        delta
    }

    fn backward_impl(
        &self,
        trace: &MlpTrace,
        upstream: &[f64],
        mut grads: Option<&mut [Vec<f64>]>,
    ) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut delta = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i != last {
                for (d, &z) in delta.iter_mut().zip(&trace.pre[i]) {
                    *d *= mish_grad_scalar(z);
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                let (gw, rest) = g[2 * i..2 * i + 2].split_at_mut(1);
                layer.accumulate(&trace.inputs[i], &delta, &mut gw[0], &mut rest[0]);
            }
            delta = layer.backward_input(&delta);
        }
        delta
    }

    /// Accumulate effective-weight gradients into `grads` (two arrays per
    /// layer, weight then bias) and return the input gradient. Call
    /// [`Mlp::finalize_grads`] after the last accumulation of a batch.
    pub fn backward(&self, trace: &MlpTrace, upstream: &[f64], grads: &mut [Vec<f64>]) -> Vec<f64> {
        debug_assert_eq!(grads.len(), 2 * self.layers.len());
        self.backward_impl(trace, upstream, Some(grads))
    }

    /// Input gradient only.
    pub fn backward_input(&self, trace: &MlpTrace, upstream: &[f64]) -> Vec<f64> {
        self.backward_impl(trace, upstream, None)
    }

    /// Convert accumulated effective-weight gradients into raw parameter
    /// gradients (a no-op for layers without spectral normalization).
    pub fn finalize_grads(&self, grads: &mut [Vec<f64>]) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.weight_grad_from_effective(&mut grads[2 * i]);
        }
    }

    /// Checked single-sample forward/backward returning the output, finalized
    /// parameter gradients and the input gradient.
    pub fn forward_backward(
        &self,
        x: &[f64],
        upstream: &[f64],
    ) -> Result<(Vec<f64>, ParamGrads, Vec<f64>)> {
        check_len("mlp input", self.in_dim(), x.len())?;
        check_len("mlp upstream gradient", self.out_dim(), upstream.len())?;
        let trace = self.forward_trace(x);
        let mut grads = self.zero_grads();
        let dx = self.backward(&trace, upstream, &mut grads.arrays);
        self.finalize_grads(&mut grads.arrays);
        Ok((trace.output, grads, dx))
    }
}

impl Parameterized for Mlp {
    fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layers.{i}.weight"), format!("layers.{i}.bias")])
            .collect()
    }

    fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight(), l.bias()])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            let (w, b) = l.params_mut();
            out.push(w);
            out.push(b);
        }
        out
    }

    fn buffer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spectral_enabled())
            .map(|(i, _)| format!("layers.{i}.spectral_v"))
            .collect()
    }

    fn buffers(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .filter_map(|l| l.spectral().map(|s| s.v()))
            .collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers
            .iter_mut()
            .filter_map(|l| l.spectral_v_mut())
            .collect()
    }

    fn refresh(&mut self) {
        for l in &mut self.layers {
            l.refresh();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_linear_layer_input_grad_is_transpose() {
        let layer = DenseLayer::from_parts(vec![1.0, 2.0, 3.0, 4.0], vec![0.5, -0.5], 2, None).unwrap();
        let mlp = Mlp::from_layers(vec![layer]).unwrap();
        let (y, grads, dx) = mlp.forward_backward(&[1.0, 1.0], &[2.0, 3.0]).unwrap();
        assert_eq!(y, vec![3.5, 6.5]);
        assert_eq!(dx, vec![2.0 + 9.0, 4.0 + 12.0]);
        assert_eq!(grads.arrays[0], vec![2.0, 2.0, 3.0, 3.0]);
        assert_eq!(grads.arrays[1], vec![2.0, 3.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&[4, 8, 8, 2], true, &mut rng).unwrap();
        let (_, grads, dx) = mlp.forward_backward(&[0.1, -0.2, 0.3, 0.9], &[0.0, 0.0]).unwrap();
        assert!(grads.arrays.iter().flatten().all(|&g| g == 0.0));
        assert!(dx.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&[3, 5, 1], false, &mut rng).unwrap();
        assert!(mlp.forward_backward(&[1.0, 2.0], &[1.0]).is_err());
        assert!(mlp.forward_backward(&[1.0, 2.0, 3.0], &[1.0, 1.0]).is_err());
        assert!(Mlp::new(&[3], false, &mut rng).is_err());
    }

    #[test]
    fn identical_seeds_bit_identical() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            Mlp::new(&[3, 16, 16, 2], true, &mut rng).unwrap()
        };
        let (a, b) = (build(), build());
        let x = [0.3, -1.2, 0.05];
        let ra = a.forward_backward(&x, &[1.0, -0.5]).unwrap();
        let rb = b.forward_backward(&x, &[1.0, -0.5]).unwrap();
        assert_eq!(ra.0, rb.0);
        assert_eq!(ra.1, rb.1);
        assert_eq!(ra.2, rb.2);
    }

    #[test]
    fn names_align_with_arrays() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&[2, 4, 1], true, &mut rng).unwrap();
        assert_eq!(mlp.param_names().len(), mlp.params().len());
        assert_eq!(mlp.buffer_names().len(), mlp.buffers().len());
        assert_eq!(mlp.num_params(), 2 * 4 + 4 + 4 + 1);
    }
}
