//! Adaptive moment estimation (Adam) over named parameter arrays.

use super::grads::ParamGrads;
use super::mlp::Parameterized;
use crate::error::{check_len, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize], lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model<M: Parameterized + ?Sized>(model: &M, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self::new(&model.param_shapes(), lr, beta1, beta2)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Gradient-descent step on `model`, followed by `model.refresh()`.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M, grads: &ParamGrads) -> Result<()> {
        check_len("adam gradient arrays", self.m.len(), grads.len())?;
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = self.lr / bc1;
        {
            let params = model.params_mut();
            check_len("adam parameter arrays", self.m.len(), params.len())?;
            for (((p, g), m), v) in params
                .into_iter()
                .zip(&grads.arrays)
                .zip(&mut self.m)
                .zip(&mut self.v)
            {
                check_len("adam array", p.len(), g.len())?;
                for i in 0..p.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    p[i] -= step_size * m[i] / ((v[i] / bc2).sqrt() + self.eps);
                }
            }
        }
        model.refresh();
        Ok(())
    }

    /// Moment arrays and step count, for checkpointing.
    pub fn state(&self) -> (u64, &[Vec<f64>], &[Vec<f64>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        check_len("adam first moments", self.m.len(), m.len())?;
        check_len("adam second moments", self.v.len(), v.len())?;
        for (a, b) in self.m.iter().zip(&m) {
            check_len("adam moment array", a.len(), b.len())?;
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
