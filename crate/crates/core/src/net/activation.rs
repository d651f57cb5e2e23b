//! Mish activation, `x * tanh(softplus(x))`, and its derivative.

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// Past this point tanh(softplus(x)) == 1 in double precision.
const MISH_LINEAR: f64 = 40.0;

/// Uses `tanh(ln(1 + e)) = n / (n + 2)` with `e = exp(x)`, `n = e (e + 2)`,
/// which needs a single exponential.
#[inline]
pub fn mish_scalar(x: f64) -> f64 {
    if x > MISH_LINEAR {
        return x;
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    x * n / (n + 2.0)
}

/// `d/dx mish(x) = n / (n + 2) + 4 x e (e + 1) / (n + 2)^2`, same `e`, `n`
/// as [`mish_scalar`].
#[inline]
pub fn mish_grad_scalar(x: f64) -> f64 {
    if x > MISH_LINEAR {
        return 1.0;
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    let d = n + 2.0;
    n / d + 4.0 * x * e * (e + 1.0) / (d * d)
}

/// Reference form `tanh(sp) + x sech^2(sp) sigmoid(x)`, kept for testing.
#[cfg(test)]
fn mish_grad_reference(x: f64) -> f64 {
    let th = softplus(x).tanh();
    th + x * (1.0 - th * th) * sigmoid(x)
}

/// Elementwise Mish.
pub fn mish(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| mish_scalar(x)).collect()
}
