//! Distributional generalized advantage estimation over quantile supports.
//!
//! Every operation is affine and acts elementwise on the support index, so the
//! mean of a distributional advantage equals the classical scalar advantage
//! computed from per-state mean values.

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lam: f64,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lam: 0.95,
        }
    }
}

impl GaeConfig {
    pub fn new(gamma: f64, lam: f64) -> Result<Self> {
        for (name, v) in [("gamma", gamma), ("lambda", lam)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(Self { gamma, lam })
    }

    /// Wasserstein contraction modulus `gamma (1 - lambda) / (1 - lambda gamma)`
    /// of the lambda-mixture Bellman operator.
    pub fn contraction_factor(&self) -> f64 {
        self.gamma * (1.0 - self.lam) / (1.0 - self.lam * self.gamma)
    }
}

/// Advantage distribution supports. Not sorted: elementwise differences of
/// sorted vectors need not be monotone.
#[derive(Debug, Clone, PartialEq)]
pub struct DistAdvantage {
    pub values: Vec<f64>,
}

impl DistAdvantage {
    pub fn zeros(k: usize) -> Self {
        Self { values: vec![0.0; k] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// How a stored transition ends.
#[derive(Debug, Clone, PartialEq)]
pub enum StepEnd<T> {
    /// The next stored step continues the same episode.
    Continue,
    /// True terminal: nothing to bootstrap from.
    Terminal,
    /// Rollout cut here; bootstrap from the given next-state value.
    Truncated(T),
}

/// `reward + gamma * z_next - z_curr`, elementwise on sorted supports. A
/// terminal transition drops the `z_next` term.
pub fn dist_td(
    reward: f64,
    z_next: &[f64],
    z_curr: &[f64],
    gamma: f64,
    terminal: bool,
) -> Result<DistAdvantage> {
    check_len("distributional td supports", z_curr.len(), z_next.len())?;
    let values = z_curr
        .iter()
        .zip(z_next)
        .map(|(&c, &n)| {
            let boot = if terminal { 0.0 } else { gamma * n };
            reward + boot - c
        })
        .collect();
    Ok(DistAdvantage { values })
}

/// Reverse sweep `A_t = delta_t + gamma * lambda * A_{t+1}`, restarting at
/// every terminal or truncated step.
///
/// `values[t]` is the predicted distribution at step `t`; `ends[t]` says how
/// the transition out of step `t` ends. The last step may not be `Continue`.
pub fn dist_gae_backward(
    rewards: &[f64],
    values: &[Vec<f64>],
    ends: &[StepEnd<Vec<f64>>],
    cfg: &GaeConfig,
) -> Result<Vec<DistAdvantage>> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    check_len("trajectory values", n, values.len())?;
    check_len("trajectory ends", n, ends.len())?;
    if matches!(ends[n - 1], StepEnd::Continue) {
        return Err(Error::InvalidArgument(
            "last step must be terminal or truncated with a bootstrap value".into(),
        ));
    }
    let k = values[0].len();
    let mut out = vec![DistAdvantage::zeros(k); n];
    let mut next_adv = DistAdvantage::zeros(k);
    for t in (0..n).rev() {
        check_len("trajectory value supports", k, values[t].len())?;
        let delta = match &ends[t] {
            StepEnd::Continue => dist_td(rewards[t], &values[t + 1], &values[t], cfg.gamma, false)?,
            StepEnd::Terminal => dist_td(rewards[t], &values[t], &values[t], cfg.gamma, true)?,
            StepEnd::Truncated(boot) => dist_td(rewards[t], boot, &values[t], cfg.gamma, false)?,
        };
        let carry = matches!(ends[t], StepEnd::Continue);
        let coeff = cfg.gamma * cfg.lam;
        let adv: Vec<f64> = delta
            .values
            .iter()
            .zip(&next_adv.values)
            .map(|(&d, &a)| if carry { d + coeff * a } else { d })
            .collect();
        next_adv = DistAdvantage { values: adv };
        out[t] = next_adv.clone();
    }
    Ok(out)
}

/// `sort(pred + adv)`, stable ascending.
pub fn target_returns(pred: &[f64], adv: &DistAdvantage) -> Result<Vec<f64>> {
    check_len("target return supports", pred.len(), adv.len())?;
    let mut tgt: Vec<f64> = pred.iter().zip(&adv.values).map(|(p, a)| p + a).collect();
    tgt.sort_by(|a, b| a.total_cmp(b));
    Ok(tgt)
}

/// Arithmetic mean of the advantage supports.
pub fn scalarize(adv: &DistAdvantage) -> f64 {
    adv.values.iter().sum::<f64>() / adv.values.len() as f64
}

/// Classical scalar GAE with the same episode-boundary conventions as
/// [`dist_gae_backward`].
pub fn scalar_gae(rewards: &[f64], values: &[f64], ends: &[StepEnd<f64>], cfg: &GaeConfig) -> Result<Vec<f64>> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    check_len("trajectory values", n, values.len())?;
    check_len("trajectory ends", n, ends.len())?;
    if matches!(ends[n - 1], StepEnd::Continue) {
        return Err(Error::InvalidArgument(
            "last step must be terminal or truncated with a bootstrap value".into(),
        ));
    }
    let mut out = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        next = match ends[t] {
            StepEnd::Continue => rewards[t] + cfg.gamma * values[t + 1] - values[t] + cfg.gamma * cfg.lam * next,
            StepEnd::Terminal => rewards[t] - values[t],
            StepEnd::Truncated(b) => rewards[t] + cfg.gamma * b - values[t],
        };
        out[t] = next;
    }
    Ok(out)
}

/// 1-Wasserstein distance between two equal-size, equal-weight sorted
/// quantile vectors: mean absolute difference of paired supports.
pub fn w1_sorted(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("w1 supports", a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::InvalidArgument("w1 of empty distributions".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Finitely supported distribution with arbitrary nonnegative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomDistribution {
    /// `(location, weight)` pairs; weights sum to one.
    pub atoms: Vec<(f64, f64)>,
}

impl AtomDistribution {
    pub fn from_quantiles(supports: &[f64]) -> Self {
        let w = 1.0 / supports.len() as f64;
        Self {
            atoms: supports.iter().map(|&x| (x, w)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(x, w)| x * w).sum()
    }

    pub fn total_weight(&self) -> f64 {
        self.atoms.iter().map(|(_, w)| w).sum()
    }
}

/// Exact 1-Wasserstein distance between weighted atom distributions,
/// `integral |F_a(x) - F_b(x)| dx`.
pub fn w1_atoms(a: &AtomDistribution, b: &AtomDistribution) -> f64 {
    let mut events: Vec<(f64, f64)> = Vec::with_capacity(a.atoms.len() + b.atoms.len());
    events.extend(a.atoms.iter().map(|&(x, w)| (x, w)));
    events.extend(b.atoms.iter().map(|&(x, w)| (x, -w)));
    events.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut diff = 0.0;
    let mut total = 0.0;
    for pair in events.windows(2) {
        diff += pair[0].1;
        total += diff.abs() * (pair[1].0 - pair[0].0);
    }
    total
}

/// Deterministic MDP over a functional graph: state `s` pays `reward[s]` and
/// moves to `next[s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalMdp {
    pub next: Vec<usize>,
    pub reward: Vec<f64>,
}

impl FunctionalMdp {
    pub fn new(next: Vec<usize>, reward: Vec<f64>) -> Result<Self> {
        check_len("mdp rewards", next.len(), reward.len())?;
        if let Some(&bad) = next.iter().find(|&&s| s >= next.len()) {
            return Err(Error::InvalidArgument(format!("transition to unknown state {bad}")));
        }
        Ok(Self { next, reward })
    }

    pub fn num_states(&self) -> usize {
        self.next.len()
    }

    /// The distributional GAE operator: the geometric lambda-mixture of
    /// `n`-step distributional Bellman backups, `(1 - lambda) sum_n
    /// lambda^(n-1) T^n Z`, truncated after `horizon` terms with the remaining
    /// mass placed on `T^horizon Z`.
    pub fn lambda_operator(&self, z: &[Vec<f64>], cfg: &GaeConfig, horizon: usize) -> Result<Vec<AtomDistribution>> {
        check_len("per-state distributions", self.num_states(), z.len())?;
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        let mut out = Vec::with_capacity(self.num_states());
        for s0 in 0..self.num_states() {
            let mut atoms = Vec::with_capacity(horizon * z[0].len());
            let mut s = s0;
            let mut ret = 0.0;
            let mut disc = 1.0;
            for n in 1..=horizon {
                ret += disc * self.reward[s];
                disc *= cfg.gamma;
                s = self.next[s];
                let mix = if n < horizon {
                    (1.0 - cfg.lam) * cfg.lam.powi(n as i32 - 1)
                } else {
                    cfg.lam.powi(n as i32 - 1)
                };
                let w = mix / z[s].len() as f64;
                if w > 0.0 {
                    atoms.extend(z[s].iter().map(|&x| (ret + disc * x, w)));
                }
            }
            out.push(AtomDistribution { atoms });
        }
        Ok(out)
    }
}
