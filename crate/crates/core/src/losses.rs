//! The composite critic objective: uncertainty-weighted flow matching
//! (UDCFM), the bootstrapped anchor term (BCFM), geometric consistency, the
//! conditional tail-risk loss and the tail shape loss, with exact gradients
//! through the flow head and state encoder.

use crate::error::{check_len, Error, Result};
use crate::flow::{normal_cdf, solve_backward, solve_traced, FlowNet, ParticleTrace, QuantileDistribution, VectorField};
use crate::net::{ParamGrads, Parameterized};

/// Weights of the auxiliary terms; the UDCFM term always has weight one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub reg: f64,
    pub cons: f64,
    pub risk: f64,
    pub shape: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reg: 0.1,
            cons: 0.01,
            risk: 0.5,
            shape: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda_reg", self.reg),
            ("lambda_cons", self.cons),
            ("lambda_risk", self.risk),
            ("lambda_shape", self.shape),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, format!("must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-term loss values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub udcfm: f64,
    pub bcfm: f64,
    pub cons: f64,
    pub risk: f64,
    pub shape: f64,
    pub total: f64,
}

/// `udcfm + reg * bcfm + cons * cons + risk * risk + shape * shape`.
pub fn total_loss(c: &LossBreakdown, w: &LossWeights) -> f64 {
    c.udcfm + w.reg * c.bcfm + w.cons * c.cons + w.risk * c.risk + w.shape * c.shape
}

/// Tail cutoffs for a `k`-quantile representation.
///
/// With 1-based indices: the left tail is `1..=k_alpha`, the right tail is
/// `k_beta..=K`, the left curvature set is `1..=k_alpha-2` and the right
/// curvature set is `k_beta..=K-2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailSpec {
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
    pub k_alpha: usize,
    pub k_beta: usize,
}

impl TailSpec {
    pub fn new(alpha: f64, beta: f64, k: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::config("alpha", format!("must lie in (0, 1), got {alpha}")));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::config("beta", format!("must lie in (0, 1), got {beta}")));
        }
        if k < 4 {
            return Err(Error::config("k", format!("need at least 4 quantiles, got {k}")));
        }
        // The epsilon keeps products like 0.9 * 50 = 44.999... on the right side of the floor.
        let k_alpha = ((alpha * k as f64 + 1e-9).floor() as usize).max(1);
        let k_beta = (((1.0 - beta) * k as f64 + 1e-9).floor() as usize).clamp(1, k);
        Ok(Self {
            alpha,
            beta,
            k,
            k_alpha,
            k_beta,
        })
    }

    /// 0-based half-open index range of the left tail.
    pub fn left_tail(&self) -> std::ops::Range<usize> {
        0..self.k_alpha
    }

    /// 0-based half-open index range of the right tail.
    pub fn right_tail(&self) -> std::ops::Range<usize> {
        self.k_beta - 1..self.k
    }

    /// 0-based starts `i` of second differences `z[i+2] - 2 z[i+1] + z[i]`
    /// in the left curvature set.
    pub fn left_curvature(&self) -> std::ops::Range<usize> {
        0..self.k_alpha.saturating_sub(2)
    }

    pub fn right_curvature(&self) -> std::ops::Range<usize> {
        let start = self.k_beta - 1;
        let end = self.k.saturating_sub(2);
        start..end.max(start)
    }
}

/// Straight interpolation path: `(t x1 + (1 - t) x0, x1 - x0)`.
pub fn flow_path(x0: f64, x1: f64, t: f64) -> (f64, f64) {
    (t * x1 + (1.0 - t) * x0, x1 - x0)
}

/// Squared residual of the left-tail means plus squared residual of the
/// right-tail means. Returns the loss and its gradient in `pred`.
pub fn risk_loss(pred: &[f64], tgt: &[f64], spec: &TailSpec) -> Result<(f64, Vec<f64>)> {
    check_len("risk loss prediction", spec.k, pred.len())?;
    check_len("risk loss target", spec.k, tgt.len())?;
    let mut grad = vec![0.0; spec.k];
    let mut loss = 0.0;
    for range in [spec.left_tail(), spec.right_tail()] {
        let n = range.len() as f64;
        let r = range.clone().map(|i| pred[i] - tgt[i]).sum::<f64>() / n;
        loss += r * r;
        for i in range {
            grad[i] += 2.0 * r / n;
        }
    }
    Ok((loss, grad))
}

/// Mean positive curvature over the left curvature set plus mean negative
/// curvature over the right curvature set. Empty sets contribute zero.
pub fn shape_loss(pred: &[f64], spec: &TailSpec) -> Result<(f64, Vec<f64>)> {
    check_len("shape loss prediction", spec.k, pred.len())?;
    let mut grad = vec![0.0; spec.k];
    let mut loss = 0.0;
    for (range, sign) in [(spec.left_curvature(), 1.0), (spec.right_curvature(), -1.0)] {
        if range.is_empty() {
            continue;
        }
        let n = range.len() as f64;
        for i in range {
            let d2 = sign * (pred[i + 2] - 2.0 * pred[i + 1] + pred[i]);
            if d2 > 0.0 {
                loss += d2 / n;
                grad[i] += sign / n;
                grad[i + 1] -= 2.0 * sign / n;
                grad[i + 2] += sign / n;
            }
        }
    }
    Ok((loss, grad))
}

/// How flow-matching targets `x1` are paired with noise draws `x0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// `x1` is a uniformly drawn target quantile, independent of `x0`.
    Independent,
    /// `x1` is the target quantile at level `Phi(x0)` (monotone transport).
    Quantile,
}

impl std::str::FromStr for Coupling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Self::Independent),
            "quantile" => Ok(Self::Quantile),
            other => Err(Error::config("coupling", format!("expected independent|quantile, got {other}"))),
        }
    }
}

impl std::fmt::Display for Coupling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Independent => "independent",
            Self::Quantile => "quantile",
        })
    }
}

/// Pick `x1` for noise `x0` from sorted targets. `u` is a uniform draw used
/// only by the independent coupling.
pub fn couple(x0: f64, targets: &[f64], coupling: Coupling, u: f64) -> f64 {
    match coupling {
        Coupling::Independent => {
            let i = ((u * targets.len() as f64) as usize).min(targets.len() - 1);
            targets[i]
        }
        Coupling::Quantile => {
            let q = QuantileDistribution::from_unsorted(targets.to_vec());
            q.quantile(normal_cdf(x0))
        }
    }
}

/// Merge several sorted `k`-vectors into one `k`-quantile summary of their
/// union (midpoint levels, linear interpolation).
pub fn pool_quantiles(sets: &[&[f64]], k: usize) -> Result<Vec<f64>> {
    if sets.is_empty() {
        return Err(Error::InvalidArgument("nothing to pool".into()));
    }
    if sets.len() == 1 && sets[0].len() == k {
        return Ok(sets[0].to_vec());
    }
    let merged: Vec<f64> = sets.iter().flat_map(|s| s.iter().copied()).collect();
    let q = QuantileDistribution::from_unsorted(merged);
    Ok(QuantileDistribution::levels(k).into_iter().map(|tau| q.quantile(tau)).collect())
}

/// One critic training example for a single state.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticSample {
    pub obs: Vec<f64>,
    /// Sorted target quantiles.
    pub target: Vec<f64>,
    /// Confidence weight, treated as a constant.
    pub w_conf: f64,
    /// Gradient-blocked anchor. `None` uses the mean of this sample's own
    /// projected quantiles (computed from `risk_noise`).
    pub anchor: Option<f64>,
    pub x0: f64,
    pub x1: f64,
    pub t: f64,
    /// Time of the first half of the symmetric consistency pair.
    pub t_cons: f64,
    /// Noise particles projected to predicted quantiles for the tail losses.
    pub risk_noise: Vec<f64>,
}

/// Coefficients applied to each term when forming the differentiated
/// objective. The training objective uses `udcfm = 1` and the
/// [`LossWeights`]; gradient checks isolate single terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub udcfm: f64,
    pub bcfm: f64,
    pub cons: f64,
    pub risk: f64,
    pub shape: f64,
}

impl From<&LossWeights> for TermWeights {
    fn from(w: &LossWeights) -> Self {
        Self {
            udcfm: 1.0,
            bcfm: w.reg,
            cons: w.cons,
            risk: w.risk,
            shape: w.shape,
        }
    }
}

impl TermWeights {
    pub fn only(term: &str) -> Result<Self> {
        let mut w = Self {
            udcfm: 0.0,
            bcfm: 0.0,
            cons: 0.0,
            risk: 0.0,
            shape: 0.0,
        };
        match term {
            "udcfm" => w.udcfm = 1.0,
            "bcfm" => w.bcfm = 1.0,
            "cons" => w.cons = 1.0,
            "risk" => w.risk = 1.0,
            "shape" => w.shape = 1.0,
            other => return Err(Error::InvalidArgument(format!("unknown loss term {other}"))),
        }
        Ok(w)
    }

    pub fn combine(&self, c: &LossBreakdown) -> f64 {
        self.udcfm * c.udcfm + self.bcfm * c.bcfm + self.cons * c.cons + self.risk * c.risk + self.shape * c.shape
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticOptions {
    pub tail: TailSpec,
    /// Euler steps for the projected quantiles of the tail losses.
    pub risk_steps: usize,
    /// Skip the tail projection entirely when both tail weights are zero.
    pub skip_unused_tail: bool,
}

enum Projection {
    OneStep(ParticleTrace),
    Solved(Vec<crate::flow::SolveTrace>),
}

/// Batch-mean loss terms and, when `want_grad`, gradients of
/// `sum_term weight * term` with respect to every flow-net parameter.
pub fn critic_objective(
    net: &FlowNet,
    batch: &[CriticSample],
    opts: &CriticOptions,
    weights: &TermWeights,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<ParamGrads>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty critic batch".into()));
    }
    if opts.risk_steps == 0 {
        return Err(Error::InvalidArgument("risk projection needs at least one step".into()));
    }
    let bn = batch.len() as f64;
    let mut grads = if want_grad { Some(net.zero_grads()) } else { None };
    let mut c = LossBreakdown::default();
    let tail_active = !(opts.skip_unused_tail && weights.risk == 0.0 && weights.shape == 0.0);
    let state_dim = net.shape().state_dim;

    for s in batch {
        check_len("critic sample target", opts.tail.k, s.target.len())?;
        let enc = net.encoder().forward_trace(&s.obs);
        let h = enc.output().to_vec();
        check_len("state embedding", state_dim, h.len())?;
        let mut dh = vec![0.0; state_dim];

        // Tail losses on projected, sorted predicted quantiles
        let mut projected_mean = None;
        if tail_active || s.anchor.is_none() {
            check_len("risk noise particles", opts.tail.k, s.risk_noise.len())?;
            let (proj, values) = if opts.risk_steps == 1 {
                let tr = net.particle_trace(&s.risk_noise, 0.0, &h);
                let values: Vec<f64> = s.risk_noise.iter().zip(tr.velocities()).map(|(z0, v)| z0 + v).collect();
                (Projection::OneStep(tr), values)
            } else {
                let traces = s
                    .risk_noise
                    .iter()
                    .map(|&z0| solve_traced(net, z0, &h, opts.risk_steps))
                    .collect::<Result<Vec<_>>>()?;
                let values = traces.iter().map(|t| t.terminal()).collect();
                (Projection::Solved(traces), values)
            };
            projected_mean = Some(values.iter().sum::<f64>() / values.len() as f64);
            let mut order: Vec<usize> = (0..values.len()).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
            let (lr, gr) = risk_loss(&sorted, &s.target, &opts.tail)?;
            let (ls, gs) = shape_loss(&sorted, &opts.tail)?;
            c.risk += lr / bn;
            c.shape += ls / bn;
            if let Some(g) = grads.as_mut() {
                if weights.risk != 0.0 || weights.shape != 0.0 {
                    // Upstream gradient per particle, in original order
                    let mut up = vec![0.0; values.len()];
                    for (j, &i) in order.iter().enumerate() {
                        up[i] = (weights.risk * gr[j] + weights.shape * gs[j]) / bn;
                    }
                    match &proj {
                        Projection::OneStep(tr) => net.particle_backward(tr, &up, g, &mut dh),
                        Projection::Solved(traces) => {
                            for (tr, &u) in traces.iter().zip(&up) {
                                if u != 0.0 {
                                    solve_backward(net, tr, u, g, &mut dh);
                                }
                            }
                        }
                    }
                }
            }
        }

        // UDCFM
        let (z, u) = flow_path(s.x0, s.x1, s.t);
        let tr = net.field_trace(z, s.t, &h);
        let r = tr.velocity() - u;
        c.udcfm += s.w_conf * r * r / bn;
        if let Some(g) = grads.as_mut() {
            if weights.udcfm != 0.0 {
                net.field_backward(&tr, weights.udcfm * 2.0 * s.w_conf * r / bn, g, &mut dh);
            }
        }

        // BCFM: same noise and time, anchored endpoint. The anchor is a plain
        // number here, so no gradient reaches the computation that produced it.
        let anchor = s.anchor.or(projected_mean).expect("projection ran when anchor is absent");
        let (za, ua) = flow_path(s.x0, anchor, s.t);
        let tr = net.field_trace(za, s.t, &h);
        let r = tr.velocity() - ua;
        c.bcfm += s.w_conf * r * r / bn;
        if let Some(g) = grads.as_mut() {
            if weights.bcfm != 0.0 {
                net.field_backward(&tr, weights.bcfm * 2.0 * s.w_conf * r / bn, g, &mut dh);
            }
        }

        // Consistency: projections from t and 1 - t on the same path
        let (ta, tb) = (s.t_cons, 1.0 - s.t_cons);
        let (za, zb) = (flow_path(s.x0, s.x1, ta).0, flow_path(s.x0, s.x1, tb).0);
        let tr_a = net.field_trace(za, ta, &h);
        let tr_b = net.field_trace(zb, tb, &h);
        let d = (za + (1.0 - ta) * tr_a.velocity()) - (zb + (1.0 - tb) * tr_b.velocity());
        c.cons += d * d / bn;
        if let Some(g) = grads.as_mut() {
            if weights.cons != 0.0 {
                let up = weights.cons * 2.0 * d / bn;
                net.field_backward(&tr_a, up * (1.0 - ta), g, &mut dh);
                net.field_backward(&tr_b, -up * (1.0 - tb), g, &mut dh);
            }
        }

        if let Some(g) = grads.as_mut() {
            net.encoder_backward(&enc, &dh, g);
        }
    }

    c.total = weights.combine(&c);
    if let Some(g) = grads.as_mut() {
        net.finalize_grads(g);
    }
    Ok((c, grads))
}

/// Training objective: values per term plus gradients of the weighted total.
pub fn critic_loss_and_grad(
    net: &FlowNet,
    batch: &[CriticSample],
    opts: &CriticOptions,
    weights: &LossWeights,
) -> Result<(LossBreakdown, ParamGrads)> {
    let (mut c, g) = critic_objective(net, batch, opts, &weights.into(), true)?;
    c.total = total_loss(&c, weights);
    Ok((c, g.expect("gradients requested")))
}

/// Conditional flow-matching residual at one point of an arbitrary field,
/// `w (v(z_t, t) - (x1 - x0))^2`.
pub fn cfm_point<F: VectorField + ?Sized>(field: &F, h: &[f64], x0: f64, x1: f64, t: f64, w: f64) -> f64 {
    let (z, u) = flow_path(x0, x1, t);
    let r = field.velocity(z, t, h) - u;
    w * r * r
}

/// Squared disagreement of terminal projections from `t` and `1 - t` on the
/// path from `x0` to `x1`.
pub fn consistency_pair<F: VectorField + ?Sized>(field: &F, h: &[f64], x0: f64, x1: f64, t: f64) -> f64 {
    let proj = |tau: f64| {
        let z = flow_path(x0, x1, tau).0;
        z + (1.0 - tau) * field.velocity(z, tau, h)
    };
    let d = proj(t) - proj(1.0 - t);
    d * d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec50() -> TailSpec {
        TailSpec::new(0.1, 0.1, 50).unwrap()
    }

    #[test]
    fn tail_cutoffs_at_defaults() {
        let s = spec50();
        assert_eq!(s.k_alpha, 5);
        assert_eq!(s.k_beta, 45);
        assert_eq!(s.left_tail().len(), 5);
        assert_eq!(s.right_tail().len(), 6);
        assert_eq!(s.left_curvature(), 0..3);
        assert_eq!(s.right_curvature(), 44..48);
    }

    #[test]
    fn tail_spec_edge_cases() {
        let s = TailSpec::new(0.01, 0.01, 50).unwrap();
        assert_eq!(s.k_alpha, 1);
        assert!(s.left_curvature().is_empty());
        assert_eq!(s.k_beta, 49);
        assert!(s.right_curvature().is_empty());
        assert!(TailSpec::new(1.5, 0.1, 50).is_err());
        assert!(TailSpec::new(0.1, 0.0, 50).is_err());
        assert!(TailSpec::new(0.1, 0.1, 3).is_err());
    }

    #[test]
    fn flow_path_endpoints() {
        assert_eq!(flow_path(0.3, 1.7, 0.0), (0.3, 1.7 - 0.3));
        assert_eq!(flow_path(0.3, 1.7, 1.0), (1.7, 1.7 - 0.3));
        assert_eq!(flow_path(0.0, 2.0, 0.5), (1.0, 2.0));
    }

    #[test]
    fn risk_loss_cases() {
        let s = spec50();
        let tgt: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        assert_eq!(risk_loss(&tgt, &tgt, &s).unwrap().0, 0.0);
        let mut pred = tgt.clone();
        for p in pred.iter_mut().take(5) {
            *p += 1.0;
        }
        assert!((risk_loss(&pred, &tgt, &s).unwrap().0 - 1.0).abs() < 1e-12);
        assert!(risk_loss(&pred[..49], &tgt, &s).is_err());
    }

    #[test]
    fn shape_loss_cases() {
        let s = spec50();
        let affine: Vec<f64> = (0..50).map(|i| 0.5 * i as f64 - 2.0).collect();
        assert_eq!(shape_loss(&affine, &s).unwrap().0, 0.0);

        let mut left = affine.clone();
        left[0] = 1.0;
        left[1] = 2.0;
        left[2] = 4.0;
        let (l, _) = shape_loss(&left, &s).unwrap();
        assert!(l > 0.0);

        let mut right = affine.clone();
        right[45] = 1.0e3;
        right[46] = 1.0e3 + 2.0;
        right[47] = 1.0e3 + 3.0;
        right[48] = 1.0e3 + 4.0;
        right[49] = 1.0e3 + 5.0;
        let (l, _) = shape_loss(&right, &s).unwrap();
        assert!(l > 0.0);
    }

    #[test]
    fn shape_loss_triples_by_hand() {
        // K = 4, alpha = 0.75 gives k_alpha = 3 and a single left triple.
        let s = TailSpec::new(0.75, 0.75, 4).unwrap();
        assert_eq!(s.left_curvature(), 0..1);
        let (l, _) = shape_loss(&[1.0, 2.0, 4.0, 5.0], &s).unwrap();
        // left: d2 = 1; right set starts at k_beta = 1: triples (1,2,4) and (2,4,5)
        // contribute relu(-1) = 0 and relu(1) = 1 (mean 0.5).
        assert!((l - 1.5).abs() < 1e-12);
        let (l, _) = shape_loss(&[1.0, 3.0, 4.0, 6.0], &s).unwrap();
        // left d2 = -1 (no penalty); right: d2 = -1 then 1, so relu(1) = 1 and relu(-1) = 0, mean 0.5
        assert!((l - 0.5).abs() < 1e-12);
    }

    #[test]
    fn total_loss_combination() {
        let c = LossBreakdown {
            udcfm: 1.0,
            bcfm: 2.0,
            cons: 3.0,
            risk: 4.0,
            shape: 5.0,
            total: 0.0,
        };
        let w = LossWeights::default();
        assert!((total_loss(&c, &w) - (1.0 + 0.2 + 0.03 + 2.0 + 2.5)).abs() < 1e-12);
        let zero = LossWeights {
            reg: 0.0,
            cons: 0.0,
            risk: 0.0,
            shape: 0.0,
        };
        assert_eq!(total_loss(&c, &zero), 1.0);
        assert_eq!(total_loss(&LossBreakdown::default(), &w), 0.0);
    }

    #[test]
    fn coupling_helpers() {
        let tgt = [-1.0, 0.0, 1.0, 3.0];
        assert_eq!(couple(0.0, &tgt, Coupling::Quantile, 0.0), 0.5);
        assert_eq!(couple(-10.0, &tgt, Coupling::Quantile, 0.0), -1.0);
        assert_eq!(couple(5.0, &tgt, Coupling::Independent, 0.99), 3.0);
        assert_eq!(couple(5.0, &tgt, Coupling::Independent, 0.0), -1.0);
        let pooled = pool_quantiles(&[&[0.0, 0.0], &[2.0, 2.0]], 2).unwrap();
        assert_eq!(pooled, vec![0.0, 2.0]);
        assert!("bogus".parse::<Coupling>().is_err());
    }
}
