//! Seeded synthetic environments with a corruptible reward channel.
//!
//! Every transition carries both the clean and the corrupted reward inside a
//! [`Reward`]. Training code reads [`Reward::noisy`], evaluation code reads
//! [`Reward::clean`]; per-thread counters record both kinds of reads so tests
//! can assert that neither path touches the other channel.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

thread_local! {
    static CLEAN_READS: Cell<u64> = const { Cell::new(0) };
    static NOISY_READS: Cell<u64> = const { Cell::new(0) };
}

/// `(clean, noisy)` reward reads on this thread since the last reset.
pub fn reward_read_counts() -> (u64, u64) {
    (CLEAN_READS.with(Cell::get), NOISY_READS.with(Cell::get))
}

pub fn reset_reward_counters() {
    CLEAN_READS.with(|c| c.set(0));
    NOISY_READS.with(|c| c.set(0));
}

/// Clean and corrupted reward of one transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reward {
    clean: f64,
    noisy: f64,
}

impl Reward {
    /// Reward seen by the learner.
    pub fn noisy(&self) -> f64 {
        NOISY_READS.with(|c| c.set(c.get() + 1));
        self.noisy
    }

    /// Uncorrupted reward, for evaluation only.
    pub fn clean(&self) -> f64 {
        CLEAN_READS.with(|c| c.set(c.get() + 1));
        self.clean
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseMode {
    SignFlip,
    Dropout,
    Gaussian(f64),
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SignFlip => f.write_str("sign-flip"),
            Self::Dropout => f.write_str("dropout"),
            Self::Gaussian(s) => write!(f, "gaussian:{s}"),
        }
    }
}

impl FromStr for NoiseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sign-flip" => Ok(Self::SignFlip),
            "dropout" => Ok(Self::Dropout),
            _ => {
                let sigma = s
                    .strip_prefix("gaussian:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| v.is_finite() && *v >= 0.0);
                sigma.map(Self::Gaussian).ok_or_else(|| {
                    Error::config("noise_mode", format!("expected sign-flip|dropout|gaussian:<sigma>, got {s}"))
                })
            }
        }
    }
}

/// Reward corruption: with probability `rate`, the clean reward is negated,
/// zeroed, or perturbed by Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub rate: f64,
    pub mode: NoiseMode,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            rate: 0.0,
            mode: NoiseMode::SignFlip,
        }
    }
}

impl NoiseSpec {
    pub fn new(rate: f64, mode: NoiseMode) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::config("flip_rate", format!("must lie in [0, 1], got {rate}")));
        }
        Ok(Self { rate, mode })
    }

    /// Always consumes one uniform draw so the random stream does not depend
    /// on whether corruption fired.
    pub fn corrupt<R: Rng + ?Sized>(&self, clean: f64, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        if u >= self.rate {
            return clean;
        }
        match self.mode {
            NoiseMode::SignFlip => -clean,
            NoiseMode::Dropout => 0.0,
            NoiseMode::Gaussian(sigma) => clean + sigma * rng.sample::<f64, _>(StandardNormal),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub step_index: usize,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: EnvState,
    pub reward: Reward,
    /// True terminal (no bootstrap).
    pub terminal: bool,
    /// Time limit reached without terminating.
    pub truncated: bool,
}

pub trait Env: Send {
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn reset(&mut self) -> EnvState;
    /// Noise draws and stochastic dynamics use `rng`.
    fn step(&mut self, action: usize, rng: &mut dyn rand::RngCore) -> Result<Transition>;
}

/// Which environment to build, with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvKind {
    /// Chain of `length` states; moving right from the last state pays 1 and
    /// terminates. Actions: 0 = left, 1 = right.
    NoisyChain { length: usize, max_steps: usize },
    /// One state, two actions, one step. Both actions pay `low` or `high`
    /// with probability `1 - p_high` / `p_high`.
    BimodalBandit { low: f64, high: f64, p_high: f64 },
    /// Grid with start at the bottom-left and goal at the bottom-right. The
    /// bottom-row cells between them are risky: entering one ends the episode
    /// with `penalty` with probability `cliff_prob`. Every step costs
    /// `step_cost`; reaching the goal pays 1.
    CliffGrid {
        width: usize,
        height: usize,
        cliff_prob: f64,
        penalty: f64,
        step_cost: f64,
        max_steps: usize,
    },
}

impl EnvKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::NoisyChain { .. } => "noisy-chain",
            Self::BimodalBandit { .. } => "bimodal-bandit",
            Self::CliffGrid { .. } => "cliff-grid",
        }
    }

    /// Default parameters for a named environment.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "noisy-chain" => Ok(Self::NoisyChain {
                length: 5,
                max_steps: 20,
            }),
            "bimodal-bandit" => Ok(Self::BimodalBandit {
                low: -1.0,
                high: 3.0,
                p_high: 0.5,
            }),
            "cliff-grid" => Ok(Self::CliffGrid {
                width: 5,
                height: 3,
                cliff_prob: 0.03,
                penalty: -10.0,
                step_cost: 0.0,
                max_steps: 30,
            }),
            other => Err(Error::UnknownEnv(other.to_string())),
        }
    }

    /// Number of distinct observations.
    pub fn num_states(&self) -> usize {
        match *self {
            Self::NoisyChain { length, .. } => length,
            Self::BimodalBandit { .. } => 1,
            Self::CliffGrid { width, height, .. } => width * height,
        }
    }

    /// Observation of state `index` (row-major cell index on the grid).
    pub fn state_observation(&self, index: usize) -> Result<Vec<f64>> {
        let n = self.num_states();
        if index >= n {
            return Err(Error::InvalidArgument(format!(
                "state index {index} out of range for {} with {n} states",
                self.name()
            )));
        }
        Ok(match self {
            Self::BimodalBandit { .. } => vec![1.0],
            _ => one_hot(n, index),
        })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::NoisyChain { length, max_steps } => {
                if length < 2 {
                    return Err(Error::config("chain_length", "must be at least 2"));
                }
                if max_steps == 0 {
                    return Err(Error::config("max_steps", "must be positive"));
                }
            }
            Self::BimodalBandit { low, high, p_high } => {
                if !(0.0..=1.0).contains(&p_high) {
                    return Err(Error::config("bandit_p_high", "must lie in [0, 1]"));
                }
                if !(low.is_finite() && high.is_finite()) {
                    return Err(Error::config("bandit_low", "modes must be finite"));
                }
            }
            Self::CliffGrid {
                width,
                height,
                cliff_prob,
                penalty,
                step_cost,
                max_steps,
            } => {
                if width < 3 || height < 2 {
                    return Err(Error::config("grid_width", "grid must be at least 3 wide and 2 high"));
                }
                if !(0.0..=1.0).contains(&cliff_prob) {
                    return Err(Error::config("cliff_prob", "must lie in [0, 1]"));
                }
                if !(penalty.is_finite() && step_cost.is_finite()) {
                    return Err(Error::config("cliff_penalty", "must be finite"));
                }
                if max_steps == 0 {
                    return Err(Error::config("max_steps", "must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Build an environment.
pub fn make_env(kind: &EnvKind, noise: NoiseSpec) -> Result<Box<dyn Env>> {
    kind.validate()?;
    Ok(match *kind {
        EnvKind::NoisyChain { length, max_steps } => Box::new(NoisyChain::new(length, max_steps, noise)),
        EnvKind::BimodalBandit { low, high, p_high } => Box::new(BimodalBandit::new(low, high, p_high, noise)),
        EnvKind::CliffGrid {
            width,
            height,
            cliff_prob,
            penalty,
            step_cost,
            max_steps,
        } => Box::new(CliffGrid {
            width,
            height,
            cliff_prob,
            penalty,
            step_cost,
            max_steps,
            noise,
            pos: (0, 0),
            steps: 0,
            done: false,
        }),
    })
}

/// Build by name with default parameters.
pub fn make_env_by_name(name: &str, noise: NoiseSpec) -> Result<Box<dyn Env>> {
    make_env(&EnvKind::from_name(name)?, noise)
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

#[derive(Debug, Clone)]
pub struct NoisyChain {
    length: usize,
    max_steps: usize,
    noise: NoiseSpec,
    pos: usize,
    steps: usize,
    done: bool,
}

impl NoisyChain {
    pub fn new(length: usize, max_steps: usize, noise: NoiseSpec) -> Self {
        Self {
            length,
            max_steps,
            noise,
            pos: 0,
            steps: 0,
            done: false,
        }
    }

    /// Discounted value of the start state under the optimal policy.
    pub fn optimal_start_value(length: usize, gamma: f64) -> f64 {
        gamma.powi(length as i32 - 1)
    }

    fn state(&self) -> EnvState {
        EnvState {
            observation: one_hot(self.length, self.pos),
            step_index: self.steps,
            done: self.done,
        }
    }
}

impl Env for NoisyChain {
    fn obs_dim(&self) -> usize {
        self.length
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn reset(&mut self) -> EnvState {
        self.pos = 0;
        self.steps = 0;
        self.done = false;
        self.state()
    }

    fn step(&mut self, action: usize, rng: &mut dyn rand::RngCore) -> Result<Transition> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        if action >= 2 {
            return Err(Error::InvalidArgument(format!("chain action {action} out of range")));
        }
        self.steps += 1;
        let mut clean = 0.0;
        let mut terminal = false;
        if action == 1 {
            if self.pos + 1 == self.length {
                clean = 1.0;
                terminal = true;
            } else {
                self.pos += 1;
            }
        } else {
            self.pos = self.pos.saturating_sub(1);
        }
        let noisy = self.noise.corrupt(clean, rng);
        let truncated = !terminal && self.steps >= self.max_steps;
        self.done = terminal || truncated;
        Ok(Transition {
            state: self.state(),
            reward: Reward { clean, noisy },
            terminal,
            truncated,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BimodalBandit {
    low: f64,
    high: f64,
    p_high: f64,
    noise: NoiseSpec,
    done: bool,
}

impl BimodalBandit {
    pub fn new(low: f64, high: f64, p_high: f64, noise: NoiseSpec) -> Self {
        Self {
            low,
            high,
            p_high,
            noise,
            done: false,
        }
    }

    /// Mixture quantile at level `tau`.
    pub fn true_quantile(low: f64, high: f64, p_high: f64, tau: f64) -> f64 {
        if tau < 1.0 - p_high {
            low.min(high)
        } else {
            low.max(high)
        }
    }

    pub fn true_mean(low: f64, high: f64, p_high: f64) -> f64 {
        (1.0 - p_high) * low + p_high * high
    }
}

impl Env for BimodalBandit {
    fn obs_dim(&self) -> usize {
        1
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn reset(&mut self) -> EnvState {
        self.done = false;
        EnvState {
            observation: vec![1.0],
            step_index: 0,
            done: false,
        }
    }

    fn step(&mut self, action: usize, rng: &mut dyn rand::RngCore) -> Result<Transition> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        if action >= 2 {
            return Err(Error::InvalidArgument(format!("bandit action {action} out of range")));
        }
        let u: f64 = rng.random();
        let clean = if u < self.p_high { self.high } else { self.low };
        let noisy = self.noise.corrupt(clean, rng);
        self.done = true;
        Ok(Transition {
            state: EnvState {
                observation: vec![1.0],
                step_index: 1,
                done: true,
            },
            reward: Reward { clean, noisy },
            terminal: true,
            truncated: false,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CliffGrid {
    width: usize,
    height: usize,
    cliff_prob: f64,
    penalty: f64,
    step_cost: f64,
    max_steps: usize,
    noise: NoiseSpec,
    pos: (usize, usize),
    steps: usize,
    done: bool,
}

impl CliffGrid {
    /// Observation of the first risky cell, `(1, 0)`.
    pub fn risky_observation(width: usize, height: usize) -> Vec<f64> {
        one_hot(width * height, Self::index(width, (1, 0)))
    }

    fn index(width: usize, pos: (usize, usize)) -> usize {
        pos.1 * width + pos.0
    }

    fn is_risky(&self, pos: (usize, usize)) -> bool {
        pos.1 == 0 && pos.0 > 0 && pos.0 + 1 < self.width
    }

    fn state(&self) -> EnvState {
        EnvState {
            observation: one_hot(self.width * self.height, Self::index(self.width, self.pos)),
            step_index: self.steps,
            done: self.done,
        }
    }
}

impl Env for CliffGrid {
    fn obs_dim(&self) -> usize {
        self.width * self.height
    }

    /// 0 = up, 1 = down, 2 = left, 3 = right.
    fn n_actions(&self) -> usize {
        4
    }

    fn reset(&mut self) -> EnvState {
        self.pos = (0, 0);
        self.steps = 0;
        self.done = false;
        self.state()
    }

    fn step(&mut self, action: usize, rng: &mut dyn rand::RngCore) -> Result<Transition> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let (x, y) = self.pos;
        self.pos = match action {
            0 => (x, (y + 1).min(self.height - 1)),
            1 => (x, y.saturating_sub(1)),
            2 => (x.saturating_sub(1), y),
            3 => ((x + 1).min(self.width - 1), y),
            _ => return Err(Error::InvalidArgument(format!("grid action {action} out of range"))),
        };
        self.steps += 1;
        // Always draw, so the stream does not depend on the path taken.
        let fall: f64 = rng.random();
        let mut clean = -self.step_cost;
        let mut terminal = false;
        if self.is_risky(self.pos) && fall < self.cliff_prob {
            clean += self.penalty;
            terminal = true;
        } else if self.pos == (self.width - 1, 0) {
            clean += 1.0;
            terminal = true;
        }
        let noisy = self.noise.corrupt(clean, rng);
        let truncated = !terminal && self.steps >= self.max_steps;
        self.done = terminal || truncated;
        Ok(Transition {
            state: self.state(),
            reward: Reward { clean, noisy },
            terminal,
            truncated,
        })
    }
}

/// Fixed random orthogonal map applied to observations at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct OodTransform {
    matrix: DMatrix<f64>,
}

impl OodTransform {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        Self { matrix: g.qr().q() }
    }

    pub fn apply(&self, obs: &[f64]) -> Vec<f64> {
        let x = nalgebra::DVector::from_column_slice(obs);
        (&self.matrix * x).iter().copied().collect()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

/// Clean-return statistics over evaluation episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
    pub returns: Vec<f64>,
}

/// Run `episodes` episodes with `act` choosing actions from (possibly
/// transformed) observations, accumulating discounted clean rewards. All
/// randomness comes from a generator seeded with `seed`.
pub fn evaluate<F>(
    env: &mut dyn Env,
    mut act: F,
    episodes: usize,
    gamma: f64,
    seed: u64,
    ood: Option<&OodTransform>,
) -> Result<EvalStats>
where
    F: FnMut(&[f64], &mut ChaCha8Rng) -> usize,
{
    if episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = env.reset();
        let mut ret = 0.0;
        let mut disc = 1.0;
        while !state.done {
            let obs = match ood {
                Some(t) => t.apply(&state.observation),
                None => state.observation.clone(),
            };
            let a = act(&obs, &mut rng);
            let tr = env.step(a, &mut rng)?;
            ret += disc * tr.reward.clean();
            disc *= gamma;
            state = tr.state;
        }
        returns.push(ret);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let mut sorted = returns.clone();
    sorted.sort_by(f64::total_cmp);
    let q = |tau: f64| sorted[((tau * n) as usize).min(sorted.len() - 1)];
    Ok(EvalStats {
        episodes,
        mean_return: mean,
        std_return: var.sqrt(),
        q10: q(0.1),
        q50: q(0.5),
        q90: q(0.9),
        returns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_clean_and_full_flip_negates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = NoiseSpec::new(0.0, NoiseMode::SignFlip).unwrap();
        let all = NoiseSpec::new(1.0, NoiseMode::SignFlip).unwrap();
        for i in 0..100 {
            let r = i as f64 - 50.0;
            assert_eq!(none.corrupt(r, &mut rng), r);
            assert_eq!(all.corrupt(r, &mut rng), -r);
        }
        assert!(NoiseSpec::new(1.2, NoiseMode::Dropout).is_err());
    }

    #[test]
    fn flip_fraction_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let spec = NoiseSpec::new(0.3, NoiseMode::SignFlip).unwrap();
        let n = 100_000;
        let flips = (0..n).filter(|_| spec.corrupt(1.0, &mut rng) < 0.0).count();
        assert!((flips as f64 / n as f64 - 0.3).abs() < 0.01);
    }

    #[test]
    fn chain_optimal_return() {
        let mut env = make_env_by_name("noisy-chain", NoiseSpec::default()).unwrap();
        let stats = evaluate(env.as_mut(), |_, _| 1, 3, 0.99, 1, None).unwrap();
        for r in stats.returns {
            assert!((r - 0.99f64.powi(4)).abs() < 1e-15);
        }
        assert!((NoisyChain::optimal_start_value(5, 0.99) - 0.9606).abs() < 1e-4);
    }

    #[test]
    fn stepping_done_env_rejected() {
        let mut env = make_env_by_name("bimodal-bandit", NoiseSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset();
        env.step(0, &mut rng).unwrap();
        assert!(matches!(env.step(0, &mut rng), Err(Error::EpisodeDone)));
    }

    #[test]
    fn unknown_env_rejected() {
        assert!(matches!(
            make_env_by_name("mountain-car", NoiseSpec::default()),
            Err(Error::UnknownEnv(_))
        ));
    }

    #[test]
    fn bandit_closed_form() {
        assert_eq!(BimodalBandit::true_mean(-1.0, 3.0, 0.5), 1.0);
        assert_eq!(BimodalBandit::true_quantile(-1.0, 3.0, 0.5, 0.1), -1.0);
        assert_eq!(BimodalBandit::true_quantile(-1.0, 3.0, 0.5, 0.9), 3.0);
    }

    #[test]
    fn random_policy_bandit_mean() {
        let mut env = make_env_by_name("bimodal-bandit", NoiseSpec::default()).unwrap();
        let n = 20_000;
        let stats = evaluate(env.as_mut(), |_, r| r.random_range(0..2), n, 0.99, 3, None).unwrap();
        let se = 2.0 / (n as f64).sqrt();
        assert!((stats.mean_return - 1.0).abs() < 3.0 * se);
    }

    #[test]
    fn safe_grid_is_shortest_path() {
        let kind = EnvKind::CliffGrid {
            width: 5,
            height: 3,
            cliff_prob: 0.0,
            penalty: -10.0,
            step_cost: 0.0,
            max_steps: 30,
        };
        let mut env = make_env(&kind, NoiseSpec::default()).unwrap();
        let stats = evaluate(env.as_mut(), |_, _| 3, 4, 0.9, 0, None).unwrap();
        for r in stats.returns {
            assert!((r - 0.9f64.powi(3)).abs() < 1e-15);
        }
    }

    #[test]
    fn evaluation_is_seeded() {
        let run = || {
            let mut env = make_env_by_name("cliff-grid", NoiseSpec::default()).unwrap();
            evaluate(env.as_mut(), |_, r| r.random_range(0..4), 1, 0.99, 42, None).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ood_transform_is_orthogonal() {
        let t = OodTransform::new(6, 9);
        let m = t.matrix();
        let id = m.transpose() * m;
        for i in 0..6 {
            for j in 0..6 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((id[(i, j)] - e).abs() < 1e-12);
            }
        }
        let x = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let y = t.apply(&x);
        assert!((y.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluation_reads_only_clean_rewards() {
        reset_reward_counters();
        let mut env = make_env_by_name("noisy-chain", NoiseSpec::new(0.3, NoiseMode::SignFlip).unwrap()).unwrap();
        evaluate(env.as_mut(), |_, _| 1, 2, 0.99, 0, None).unwrap();
        let (clean, noisy) = reward_read_counts();
        assert_eq!(noisy, 0);
        assert_eq!(clean, 10);
    }
}
