//! Run configuration: every hyperparameter and toggle, loaded from a flat
//! `key = value` text file. Unspecified keys keep their defaults; unknown
//! keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::envs::{EnvKind, NoiseMode, NoiseSpec};
use crate::error::{Error, Result};
use crate::flow::FlowShape;
use crate::gae::GaeConfig;
use crate::losses::{Coupling, LossWeights, TailSpec};
use crate::policy::PpoConfig;

/// Which critic drives the policy update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticMode {
    /// Distributional flow critic.
    Dfpo,
    /// Scalar value network (reference PPO).
    Scalar,
}

impl FromStr for CriticMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dfpo" => Ok(Self::Dfpo),
            "scalar" => Ok(Self::Scalar),
            other => Err(Error::config("mode", format!("expected dfpo|scalar, got {other}"))),
        }
    }
}

impl std::fmt::Display for CriticMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dfpo => "dfpo",
            Self::Scalar => "scalar",
        })
    }
}

/// How the initial noise particles of a quantile prediction are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseScheme {
    Iid,
    Stratified,
}

impl FromStr for NoiseScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Self::Iid),
            "stratified" => Ok(Self::Stratified),
            other => Err(Error::config("noise_scheme", format!("expected iid|stratified, got {other}"))),
        }
    }
}

impl std::fmt::Display for NoiseScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Iid => "iid",
            Self::Stratified => "stratified",
        })
    }
}

/// Whether critic targets are pooled across samples of the same state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetPooling {
    PerSample,
    ByState,
}

impl FromStr for TargetPooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-sample" => Ok(Self::PerSample),
            "by-state" => Ok(Self::ByState),
            other => Err(Error::config("target_pooling", format!("expected per-sample|by-state, got {other}"))),
        }
    }
}

impl std::fmt::Display for TargetPooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerSample => "per-sample",
            Self::ByState => "by-state",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: CriticMode,
    pub seed: u64,
    pub iterations: usize,
    pub rollout_steps: usize,

    pub env: String,
    pub chain_length: usize,
    pub max_steps: usize,
    pub bandit_low: f64,
    pub bandit_high: f64,
    pub bandit_p_high: f64,
    pub grid_width: usize,
    pub grid_height: usize,
    pub cliff_prob: f64,
    pub cliff_penalty: f64,
    pub step_cost: f64,
    pub flip_rate: f64,
    pub noise_mode: NoiseMode,

    pub gamma: f64,
    pub gae_lambda: f64,

    pub lambda_reg: f64,
    pub lambda_cons: f64,
    pub lambda_risk: f64,
    pub lambda_shape: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
    pub tau_temp: f64,
    pub inference_steps: usize,
    pub jacobian_steps: usize,
    pub risk_on_solved: bool,
    pub use_conf_weight: bool,
    pub spectral_norm: bool,
    pub power_iters: usize,
    pub coupling: Coupling,
    pub noise_scheme: NoiseScheme,
    pub target_pooling: TargetPooling,

    pub state_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub time_hidden: usize,
    pub time_out: usize,
    pub head_hidden: Vec<usize>,
    pub time_max_freq: f64,
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,

    pub critic_lr: f64,
    pub policy_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub critic_batch: usize,
    pub critic_epochs: usize,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub normalize_advantages: bool,

    pub eval_every: usize,
    pub eval_episodes: usize,
    pub log_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: CriticMode::Dfpo,
            seed: 0,
            iterations: 100,
            rollout_steps: 128,
            env: "noisy-chain".into(),
            chain_length: 5,
            max_steps: 20,
            bandit_low: -1.0,
            bandit_high: 3.0,
            bandit_p_high: 0.5,
            grid_width: 5,
            grid_height: 3,
            cliff_prob: 0.03,
            cliff_penalty: -10.0,
            step_cost: 0.0,
            flip_rate: 0.0,
            noise_mode: NoiseMode::SignFlip,
            gamma: 0.99,
            gae_lambda: 0.95,
            lambda_reg: 0.1,
            lambda_cons: 0.01,
            lambda_risk: 0.5,
            lambda_shape: 0.5,
            alpha: 0.1,
            beta: 0.1,
            k: 50,
            tau_temp: 1.0,
            inference_steps: 1,
            jacobian_steps: 10,
            risk_on_solved: false,
            use_conf_weight: true,
            spectral_norm: true,
            power_iters: 1,
            coupling: Coupling::Quantile,
            noise_scheme: NoiseScheme::Stratified,
            target_pooling: TargetPooling::ByState,
            state_dim: 32,
            encoder_hidden: vec![64],
            time_embed_dim: 16,
            time_hidden: 32,
            time_out: 16,
            head_hidden: vec![128, 128],
            time_max_freq: 1e4,
            policy_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            critic_lr: 3e-4,
            policy_lr: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            critic_batch: 256,
            critic_epochs: 4,
            clip_eps: 0.2,
            entropy_coef: 0.01,
            normalize_advantages: true,
            eval_every: 10,
            eval_episodes: 20,
            log_wall_time: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Recognized keys in canonical order.
pub const KEYS: &[&str] = &[
    "mode", "seed", "iterations", "rollout_steps", "env", "chain_length", "max_steps", "bandit_low",
    "bandit_high", "bandit_p_high", "grid_width", "grid_height", "cliff_prob", "cliff_penalty",
    "step_cost", "flip_rate", "noise_mode", "gamma", "gae_lambda", "lambda_reg", "lambda_cons",
    "lambda_risk", "lambda_shape", "alpha", "beta", "K", "tau_temp", "inference_steps",
    "jacobian_steps", "risk_on_solved", "use_conf_weight", "spectral_norm", "power_iters",
    "coupling", "noise_scheme", "target_pooling", "state_dim", "encoder_hidden", "time_embed_dim",
    "time_hidden", "time_out", "head_hidden", "time_max_freq", "policy_hidden", "critic_hidden",
    "critic_lr", "policy_lr", "adam_beta1", "adam_beta2", "critic_batch", "critic_epochs",
    "clip_eps", "entropy_coef", "normalize_advantages", "eval_every", "eval_episodes",
    "log_wall_time",
];

impl RunConfig {
    /// Set one key from its text value (no cross-field validation).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "mode" => self.mode = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "rollout_steps" => self.rollout_steps = parse(key, v)?,
            "env" => self.env = v.to_string(),
            "chain_length" => self.chain_length = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "bandit_low" => self.bandit_low = parse(key, v)?,
            "bandit_high" => self.bandit_high = parse(key, v)?,
            "bandit_p_high" => self.bandit_p_high = parse(key, v)?,
            "grid_width" => self.grid_width = parse(key, v)?,
            "grid_height" => self.grid_height = parse(key, v)?,
            "cliff_prob" => self.cliff_prob = parse(key, v)?,
            "cliff_penalty" => self.cliff_penalty = parse(key, v)?,
            "step_cost" => self.step_cost = parse(key, v)?,
            "flip_rate" => self.flip_rate = parse(key, v)?,
            "noise_mode" => self.noise_mode = v.parse()?,
            "gamma" => self.gamma = parse(key, v)?,
            "gae_lambda" => self.gae_lambda = parse(key, v)?,
            "lambda_reg" => self.lambda_reg = parse(key, v)?,
            "lambda_cons" => self.lambda_cons = parse(key, v)?,
            "lambda_risk" => self.lambda_risk = parse(key, v)?,
            "lambda_shape" => self.lambda_shape = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "K" => self.k = parse(key, v)?,
            "tau_temp" => self.tau_temp = parse(key, v)?,
            "inference_steps" => self.inference_steps = parse(key, v)?,
            "jacobian_steps" => self.jacobian_steps = parse(key, v)?,
            "risk_on_solved" => self.risk_on_solved = parse_bool(key, v)?,
            "use_conf_weight" => self.use_conf_weight = parse_bool(key, v)?,
            "spectral_norm" => self.spectral_norm = parse_bool(key, v)?,
            "power_iters" => self.power_iters = parse(key, v)?,
            "coupling" => self.coupling = v.parse()?,
            "noise_scheme" => self.noise_scheme = v.parse()?,
            "target_pooling" => self.target_pooling = v.parse()?,
            "state_dim" => self.state_dim = parse(key, v)?,
            "encoder_hidden" => self.encoder_hidden = parse_list(key, v)?,
            "time_embed_dim" => self.time_embed_dim = parse(key, v)?,
            "time_hidden" => self.time_hidden = parse(key, v)?,
            "time_out" => self.time_out = parse(key, v)?,
            "head_hidden" => self.head_hidden = parse_list(key, v)?,
            "time_max_freq" => self.time_max_freq = parse(key, v)?,
            "policy_hidden" => self.policy_hidden = parse_list(key, v)?,
            "critic_hidden" => self.critic_hidden = parse_list(key, v)?,
            "critic_lr" => self.critic_lr = parse(key, v)?,
            "policy_lr" => self.policy_lr = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "critic_batch" => self.critic_batch = parse(key, v)?,
            "critic_epochs" => self.critic_epochs = parse(key, v)?,
            "clip_eps" => self.clip_eps = parse(key, v)?,
            "entropy_coef" => self.entropy_coef = parse(key, v)?,
            "normalize_advantages" => self.normalize_advantages = parse_bool(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "log_wall_time" => self.log_wall_time = parse_bool(key, v)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Text value of a key, as accepted by [`RunConfig::set`].
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "mode" => self.mode.to_string(),
            "seed" => self.seed.to_string(),
            "iterations" => self.iterations.to_string(),
            "rollout_steps" => self.rollout_steps.to_string(),
            "env" => self.env.clone(),
            "chain_length" => self.chain_length.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "bandit_low" => self.bandit_low.to_string(),
            "bandit_high" => self.bandit_high.to_string(),
            "bandit_p_high" => self.bandit_p_high.to_string(),
            "grid_width" => self.grid_width.to_string(),
            "grid_height" => self.grid_height.to_string(),
            "cliff_prob" => self.cliff_prob.to_string(),
            "cliff_penalty" => self.cliff_penalty.to_string(),
            "step_cost" => self.step_cost.to_string(),
            "flip_rate" => self.flip_rate.to_string(),
            "noise_mode" => self.noise_mode.to_string(),
            "gamma" => self.gamma.to_string(),
            "gae_lambda" => self.gae_lambda.to_string(),
            "lambda_reg" => self.lambda_reg.to_string(),
            "lambda_cons" => self.lambda_cons.to_string(),
            "lambda_risk" => self.lambda_risk.to_string(),
            "lambda_shape" => self.lambda_shape.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "K" => self.k.to_string(),
            "tau_temp" => self.tau_temp.to_string(),
            "inference_steps" => self.inference_steps.to_string(),
            "jacobian_steps" => self.jacobian_steps.to_string(),
            "risk_on_solved" => self.risk_on_solved.to_string(),
            "use_conf_weight" => self.use_conf_weight.to_string(),
            "spectral_norm" => self.spectral_norm.to_string(),
            "power_iters" => self.power_iters.to_string(),
            "coupling" => self.coupling.to_string(),
            "noise_scheme" => self.noise_scheme.to_string(),
            "target_pooling" => self.target_pooling.to_string(),
            "state_dim" => self.state_dim.to_string(),
            "encoder_hidden" => list(&self.encoder_hidden),
            "time_embed_dim" => self.time_embed_dim.to_string(),
            "time_hidden" => self.time_hidden.to_string(),
            "time_out" => self.time_out.to_string(),
            "head_hidden" => list(&self.head_hidden),
            "time_max_freq" => self.time_max_freq.to_string(),
            "policy_hidden" => list(&self.policy_hidden),
            "critic_hidden" => list(&self.critic_hidden),
            "critic_lr" => self.critic_lr.to_string(),
            "policy_lr" => self.policy_lr.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "critic_batch" => self.critic_batch.to_string(),
            "critic_epochs" => self.critic_epochs.to_string(),
            "clip_eps" => self.clip_eps.to_string(),
            "entropy_coef" => self.entropy_coef.to_string(),
            "normalize_advantages" => self.normalize_advantages.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "log_wall_time" => self.log_wall_time.to_string(),
            other => return Err(Error::config(other, "unknown key")),
        })
    }

    /// Parse `key = value` lines over the defaults; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(line, format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key in canonical order; `from_text(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("canonical key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |key: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(key, format!("must lie in [0, 1], got {v}")))
            }
        };
        let positive = |key: &str, v: usize| {
            if v > 0 {
                Ok(())
            } else {
                Err(Error::config(key, "must be positive"))
            }
        };
        let positive_f = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be finite and positive, got {v}")))
            }
        };
        unit("gamma", self.gamma)?;
        unit("gae_lambda", self.gae_lambda)?;
        unit("flip_rate", self.flip_rate)?;
        self.loss_weights().validate()?;
        self.tail_spec()?;
        positive_f("tau_temp", self.tau_temp)?;
        positive("inference_steps", self.inference_steps)?;
        positive("jacobian_steps", self.jacobian_steps)?;
        positive("power_iters", self.power_iters)?;
        positive("rollout_steps", self.rollout_steps)?;
        positive("state_dim", self.state_dim)?;
        positive("time_hidden", self.time_hidden)?;
        positive("time_out", self.time_out)?;
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config("time_embed_dim", "must be positive and even"));
        }
        if !(self.time_max_freq.is_finite() && self.time_max_freq >= 1.0) {
            return Err(Error::config("time_max_freq", "must be at least 1"));
        }
        for (key, sizes) in [
            ("encoder_hidden", &self.encoder_hidden),
            ("head_hidden", &self.head_hidden),
            ("policy_hidden", &self.policy_hidden),
            ("critic_hidden", &self.critic_hidden),
        ] {
            if sizes.contains(&0) {
                return Err(Error::config(key, "layer widths must be positive"));
            }
        }
        positive_f("critic_lr", self.critic_lr)?;
        positive_f("policy_lr", self.policy_lr)?;
        for (key, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, format!("must lie in [0, 1), got {b}")));
            }
        }
        positive("critic_batch", self.critic_batch)?;
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config("clip_eps", format!("must lie in (0, 1), got {}", self.clip_eps)));
        }
        if !(self.entropy_coef.is_finite() && self.entropy_coef >= 0.0) {
            return Err(Error::config("entropy_coef", "must be finite and nonnegative"));
        }
        positive("eval_episodes", self.eval_episodes)?;
        self.env_kind()?.validate()?;
        Ok(())
    }

    pub fn env_kind(&self) -> Result<EnvKind> {
        let kind = match self.env.as_str() {
            "noisy-chain" => EnvKind::NoisyChain {
                length: self.chain_length,
                max_steps: self.max_steps,
            },
            "bimodal-bandit" => EnvKind::BimodalBandit {
                low: self.bandit_low,
                high: self.bandit_high,
                p_high: self.bandit_p_high,
            },
            "cliff-grid" => EnvKind::CliffGrid {
                width: self.grid_width,
                height: self.grid_height,
                cliff_prob: self.cliff_prob,
                penalty: self.cliff_penalty,
                step_cost: self.step_cost,
                max_steps: self.max_steps,
            },
            other => return Err(Error::config("env", format!("unknown environment {other}"))),
        };
        Ok(kind)
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            rate: self.flip_rate,
            mode: self.noise_mode,
        }
    }

    pub fn gae(&self) -> GaeConfig {
        GaeConfig {
            gamma: self.gamma,
            lam: self.gae_lambda,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            reg: self.lambda_reg,
            cons: self.lambda_cons,
            risk: self.lambda_risk,
            shape: self.lambda_shape,
        }
    }

    pub fn tail_spec(&self) -> Result<TailSpec> {
        TailSpec::new(self.alpha, self.beta, self.k)
    }

    pub fn ppo(&self) -> PpoConfig {
        PpoConfig {
            clip_eps: self.clip_eps,
            entropy_coef: self.entropy_coef,
            normalize: self.normalize_advantages,
        }
    }

    pub fn flow_shape(&self, obs_dim: usize) -> FlowShape {
        FlowShape {
            obs_dim,
            state_dim: self.state_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            time_embed_dim: self.time_embed_dim,
            time_hidden: self.time_hidden,
            time_out: self.time_out,
            head_hidden: self.head_hidden.clone(),
            spectral: self.spectral_norm,
            time_max_freq: self.time_max_freq,
        }
    }
}

/// Read and validate a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::from_text("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.lambda_reg, 0.1);
        assert_eq!(cfg.lambda_cons, 0.01);
        assert_eq!(cfg.lambda_risk, 0.5);
        assert_eq!(cfg.lambda_shape, 0.5);
        assert_eq!(cfg.alpha, 0.1);
        assert_eq!(cfg.beta, 0.1);
        assert_eq!(cfg.k, 50);
        assert_eq!(cfg.jacobian_steps, 10);
        assert_eq!(cfg.inference_steps, 1);
    }

    #[test]
    fn range_violation_names_key() {
        let err = RunConfig::from_text("alpha = 1.5").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "alpha"), "{err}");
        let err = RunConfig::from_text("gamma = 2").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "gamma"));
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_text("learning_rate = 0.1").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "learning_rate"));
    }

    #[test]
    fn parse_error_names_key() {
        let err = RunConfig::from_text("K = fifty").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "K"));
    }

    #[test]
    fn table6_steps_accepted() {
        for s in [1, 5, 10, 20] {
            let cfg = RunConfig::from_text(&format!("inference_steps = {s}")).unwrap();
            assert_eq!(cfg.inference_steps, s);
        }
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("head_hidden", "7,9").unwrap();
        cfg.set("noise_mode", "gaussian:0.25").unwrap();
        cfg.set("critic_lr", "0.00012345678901234").unwrap();
        cfg.set("mode", "scalar").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::from_text("# header\n\nseed = 7  # trailing\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }
}
