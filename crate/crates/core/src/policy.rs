//! Softmax policy over discrete actions with a clipped-surrogate update, and a
//! plain scalar value critic used by the reference PPO mode.

use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::gae::{scalar_gae, GaeConfig, StepEnd};
use crate::net::{Adam, Mlp, ParamGrads, Parameterized};

/// Action distribution at one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl PolicyOutput {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let log_probs = logits.iter().map(|l| l - lse).collect();
        Self { logits, log_probs }
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn log_prob(&self, action: usize) -> f64 {
        self.log_probs[action]
    }

    pub fn entropy(&self) -> f64 {
        -self
            .log_probs
            .iter()
            .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l })
            .sum::<f64>()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probs().iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.logits.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    net: Mlp,
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], n_actions: usize, rng: &mut R) -> Result<Self> {
        if n_actions < 2 {
            return Err(Error::InvalidArgument(format!("need at least two actions, got {n_actions}")));
        }
        let mut sizes = vec![obs_dim];
        sizes.extend(hidden);
        sizes.push(n_actions);
        Ok(Self {
            net: Mlp::new(&sizes, false, rng)?,
        })
    }

    pub fn from_mlp(net: Mlp) -> Self {
        Self { net }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn n_actions(&self) -> usize {
        self.net.out_dim()
    }

    pub fn output(&self, obs: &[f64]) -> PolicyOutput {
        PolicyOutput::from_logits(self.net.forward(obs))
    }
}

impl Parameterized for Policy {
    fn param_names(&self) -> Vec<String> {
        self.net.param_names()
    }
    fn params(&self) -> Vec<&[f64]> {
        self.net.params()
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.params_mut()
    }
    fn buffer_names(&self) -> Vec<String> {
        Vec::new()
    }
    fn buffers(&self) -> Vec<&[f64]> {
        Vec::new()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        Vec::new()
    }
    fn refresh(&mut self) {}
}

/// `min(ratio * adv, clip(ratio, 1 - eps, 1 + eps) * adv)`.
pub fn ppo_surrogate(ratio: f64, adv: f64, eps: f64) -> Result<f64> {
    if ratio.is_nan() || ratio <= 0.0 {
        return Err(Error::InvalidArgument(format!("probability ratio must be positive, got {ratio}")));
    }
    Ok((ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv))
}

/// Derivative of [`ppo_surrogate`] in the ratio: `adv` on the unclipped
/// branch, zero where the clip binds.
fn surrogate_dratio(ratio: f64, adv: f64, eps: f64) -> f64 {
    let active = if adv >= 0.0 { ratio <= 1.0 + eps } else { ratio >= 1.0 - eps };
    if active {
        adv
    } else {
        0.0
    }
}

/// Shift to zero mean and scale to unit standard deviation. A standard
/// deviation below `1e-8` leaves the centered values unscaled.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    if adv.is_empty() {
        return Vec::new();
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = if std < 1e-8 { 1.0 } else { 1.0 / std };
    adv.iter().map(|a| (a - mean) * scale).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub normalize: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            entropy_coef: 0.01,
            normalize: true,
        }
    }
}

/// Transitions for one policy update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolicyBatch {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl PolicyBatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("empty policy batch".into()));
        }
        check_len("policy batch actions", self.len(), self.actions.len())?;
        check_len("policy batch log-probs", self.len(), self.old_log_probs.len())?;
        check_len("policy batch advantages", self.len(), self.advantages.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PolicyDiagnostics {
    pub objective: f64,
    pub mean_entropy: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// Objective `mean(surrogate) + entropy_coef * mean(entropy)` with the
/// advantages used exactly as given, and the gradient of its negation.
pub fn surrogate_objective(
    policy: &Policy,
    batch: &PolicyBatch,
    cfg: &PpoConfig,
) -> Result<(PolicyDiagnostics, ParamGrads)> {
    batch.check()?;
    let n = batch.len() as f64;
    let mut grads = policy.zero_grads();
    let mut diag = PolicyDiagnostics::default();
    for i in 0..batch.len() {
        let trace = policy.net.forward_trace(&batch.obs[i]);
        let out = PolicyOutput::from_logits(trace.output().to_vec());
        let a = batch.actions[i];
        if a >= out.logits.len() {
            return Err(Error::InvalidArgument(format!("action {a} out of range")));
        }
        let ratio = (out.log_prob(a) - batch.old_log_probs[i]).exp();
        let adv = batch.advantages[i];
        let surr = ppo_surrogate(ratio, adv, cfg.clip_eps)?;
        let ent = out.entropy();
        diag.objective += (surr + cfg.entropy_coef * ent) / n;
        diag.mean_entropy += ent / n;
        if (ratio - 1.0).abs() > cfg.clip_eps {
            diag.clip_fraction += 1.0 / n;
        }
        let ds = surrogate_dratio(ratio, adv, cfg.clip_eps);
        let p = out.probs();
        let up: Vec<f64> = (0..p.len())
            .map(|j| {
                let onehot = if j == a { 1.0 } else { 0.0 };
                let d_surr = ds * ratio * (onehot - p[j]);
                let d_ent = if p[j] > 0.0 { -p[j] * (out.log_probs[j] + ent) } else { 0.0 };
                -(d_surr + cfg.entropy_coef * d_ent) / n
            })
            .collect();
        policy.net.backward(&trace, &up, &mut grads.arrays);
    }
    policy.net.finalize_grads(&mut grads.arrays);
    diag.grad_norm = grads.global_norm();
    Ok((diag, grads))
}

/// One gradient step maximizing the clipped surrogate plus entropy bonus.
/// A non-finite gradient aborts before touching the parameters.
pub fn policy_update(
    policy: &mut Policy,
    adam: &mut Adam,
    batch: &PolicyBatch,
    cfg: &PpoConfig,
    batch_id: usize,
) -> Result<PolicyDiagnostics> {
    let normalized;
    let batch = if cfg.normalize {
        normalized = PolicyBatch {
            advantages: normalize_advantages(&batch.advantages),
            ..batch.clone()
        };
        &normalized
    } else {
        batch
    };
    let (diag, grads) = surrogate_objective(policy, batch, cfg)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            what: "policy gradient",
            step: batch_id,
        });
    }
    adam.step(policy, &grads)?;
    Ok(diag)
}

/// Scalar value network for the reference PPO mode, trained on TD(lambda)
/// targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarCritic {
    net: Mlp,
}

impl ScalarCritic {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut sizes = vec![obs_dim];
        sizes.extend(hidden);
        sizes.push(1);
        Ok(Self {
            net: Mlp::new(&sizes, false, rng)?,
        })
    }

    pub fn value(&self, obs: &[f64]) -> f64 {
        self.net.forward(obs)[0]
    }

    /// Mean squared error to `targets` and its gradient.
    pub fn loss_and_grad(&self, obs: &[Vec<f64>], targets: &[f64]) -> Result<(f64, ParamGrads)> {
        check_len("critic targets", obs.len(), targets.len())?;
        if obs.is_empty() {
            return Err(Error::InvalidArgument("empty critic batch".into()));
        }
        let n = obs.len() as f64;
        let mut grads = self.zero_grads();
        let mut loss = 0.0;
        for (x, &y) in obs.iter().zip(targets) {
            let trace = self.net.forward_trace(x);
            let r = trace.output()[0] - y;
            loss += r * r / n;
            self.net.backward(&trace, &[2.0 * r / n], &mut grads.arrays);
        }
        self.net.finalize_grads(&mut grads.arrays);
        Ok((loss, grads))
    }

    pub fn update(&mut self, adam: &mut Adam, obs: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
        let (loss, grads) = self.loss_and_grad(obs, targets)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite {
                what: "scalar critic gradient",
                step: 0,
            });
        }
        adam.step(self, &grads)?;
        Ok(loss)
    }
}

impl Parameterized for ScalarCritic {
    fn param_names(&self) -> Vec<String> {
        self.net.param_names()
    }
    fn params(&self) -> Vec<&[f64]> {
        self.net.params()
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.params_mut()
    }
    fn buffer_names(&self) -> Vec<String> {
        Vec::new()
    }
    fn buffers(&self) -> Vec<&[f64]> {
        Vec::new()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        Vec::new()
    }
    fn refresh(&mut self) {}
}

/// TD(lambda) value targets: scalar GAE advantages plus the current values.
pub fn td_lambda_targets(
    rewards: &[f64],
    values: &[f64],
    ends: &[StepEnd<f64>],
    cfg: &GaeConfig,
) -> Result<Vec<f64>> {
    let adv = scalar_gae(rewards, values, ends, cfg)?;
    Ok(adv.iter().zip(values).map(|(a, v)| a + v).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn surrogate_examples() {
        assert!((ppo_surrogate(1.3, 1.0, 0.2).unwrap() - 1.2).abs() < 1e-15);
        for eps in [0.05, 0.2, 0.5] {
            assert_eq!(ppo_surrogate(1.0, -0.7, eps).unwrap(), -0.7);
        }
        assert!((ppo_surrogate(0.5, -1.0, 0.2).unwrap() + 0.8).abs() < 1e-15);
        assert!(ppo_surrogate(0.0, 1.0, 0.2).is_err());
        assert!(ppo_surrogate(-1.0, 1.0, 0.2).is_err());
    }

    #[test]
    fn output_invariants() {
        let out = PolicyOutput::from_logits(vec![1.0, -2.0, 0.5]);
        assert!((out.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let h = out.entropy();
        assert!(h >= 0.0 && h <= 3f64.ln());
        let uniform = PolicyOutput::from_logits(vec![0.0; 4]);
        assert!((uniform.entropy() - 4f64.ln()).abs() < 1e-12);
        let huge = PolicyOutput::from_logits(vec![1000.0, 0.0]);
        assert!(huge.log_probs.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn normalization_guards_constant() {
        assert_eq!(normalize_advantages(&[2.0, 2.0, 2.0]), vec![0.0; 3]);
        let n = normalize_advantages(&[1.0, 3.0]);
        assert_eq!(n, vec![-1.0, 1.0]);
    }

    #[test]
    fn zero_advantage_without_bonus_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut policy = Policy::new(3, &[8], 2, &mut rng).unwrap();
        let before = policy.clone();
        let mut adam = Adam::for_model(&policy, 3e-4, 0.9, 0.999);
        let obs = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let batch = PolicyBatch {
            old_log_probs: obs.iter().map(|o| policy.output(o).log_prob(0)).collect(),
            obs,
            actions: vec![0, 0],
            advantages: vec![0.0, 0.0],
        };
        let cfg = PpoConfig {
            entropy_coef: 0.0,
            ..PpoConfig::default()
        };
        policy_update(&mut policy, &mut adam, &batch, &cfg, 0).unwrap();
        assert_eq!(policy, before);
    }

    #[test]
    fn positive_advantage_raises_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut policy = Policy::new(1, &[8], 2, &mut rng).unwrap();
        let obs = vec![1.0];
        let p0 = policy.output(&obs).probs()[0];
        let mut adam = Adam::for_model(&policy, 1e-2, 0.9, 0.999);
        let batch = PolicyBatch {
            obs: vec![obs.clone()],
            actions: vec![0],
            old_log_probs: vec![policy.output(&obs).log_prob(0)],
            advantages: vec![1.0],
        };
        let cfg = PpoConfig {
            normalize: false,
            entropy_coef: 0.0,
            ..PpoConfig::default()
        };
        policy_update(&mut policy, &mut adam, &batch, &cfg, 0).unwrap();
        assert!(policy.output(&obs).probs()[0] > p0);
    }

    #[test]
    fn td_lambda_with_zero_gamma_is_reward() {
        let cfg = GaeConfig::new(0.0, 0.95).unwrap();
        let ends = vec![StepEnd::Continue, StepEnd::Continue, StepEnd::Truncated(5.0)];
        let t = td_lambda_targets(&[1.0, -2.0, 0.5], &[3.0, 1.0, 7.0], &ends, &cfg).unwrap();
        assert_eq!(t, vec![1.0, -2.0, 0.5]);
    }
}
