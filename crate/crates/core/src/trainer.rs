//! The training loop: rollouts, distributional value estimation, D-GAE,
//! critic updates on the composite objective, and the clipped policy update.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::Checkpoint;
use crate::config::{CriticMode, NoiseScheme, RunConfig, TargetPooling};
use crate::envs::{evaluate, make_env, Env, EvalStats, OodTransform};
use crate::error::{Error, Result};
use crate::flow::{
    confidence_weight, iid_normal, jacobian_sensitivity, sample_distribution_from_noise, stratified_normal, FlowNet,
    QuantileDistribution,
};
use crate::gae::{dist_gae_backward, scalar_gae, scalarize, target_returns, StepEnd};
use crate::losses::{couple, critic_loss_and_grad, pool_quantiles, CriticOptions, CriticSample, LossBreakdown};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::net::Adam;
use crate::policy::{policy_update, Policy, PolicyBatch, ScalarCritic};

/// Rollout storage for one iteration.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryBatch {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// How each transition ends; truncations carry the next observation.
    pub ends: Vec<StepEnd<Vec<f64>>>,
    /// Predicted quantiles per step.
    pub predicted: Vec<Vec<f64>>,
    /// Distributional advantages per step.
    pub advantages: Vec<Vec<f64>>,
    /// Sorted target quantiles per step.
    pub targets: Vec<Vec<f64>>,
    /// Undiscounted noisy returns of episodes finished in this rollout.
    pub episode_returns: Vec<f64>,
}

pub enum Critic {
    Flow { net: FlowNet, opt: Adam },
    Scalar { net: ScalarCritic, opt: Adam },
}

/// Summary of one training iteration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterationStats {
    pub losses: Vec<LossBreakdown>,
    pub mean_w_conf: f64,
    pub mean_scalar_adv: f64,
    pub noisy_train_return: Option<f64>,
    pub eval: Option<EvalStats>,
}

pub struct Trainer {
    cfg: RunConfig,
    env: Box<dyn Env>,
    policy: Policy,
    policy_opt: Adam,
    critic: Critic,
    rng: ChaCha8Rng,
    iteration: usize,
    update: usize,
    start: Instant,
}

fn obs_key(obs: &[f64]) -> Vec<u64> {
    obs.iter().map(|x| x.to_bits()).collect()
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let env = make_env(&cfg.env_kind()?, cfg.noise())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let policy = Policy::new(env.obs_dim(), &cfg.policy_hidden, env.n_actions(), &mut rng)?;
        let policy_opt = Adam::for_model(&policy, cfg.policy_lr, cfg.adam_beta1, cfg.adam_beta2);
        let critic = match cfg.mode {
            CriticMode::Dfpo => {
                let mut net = FlowNet::new(cfg.flow_shape(env.obs_dim()), &mut rng)?;
                net.power_iterate(cfg.power_iters);
                let opt = Adam::for_model(&net, cfg.critic_lr, cfg.adam_beta1, cfg.adam_beta2);
                Critic::Flow { net, opt }
            }
            CriticMode::Scalar => {
                let net = ScalarCritic::new(env.obs_dim(), &cfg.critic_hidden, &mut rng)?;
                let opt = Adam::for_model(&net, cfg.critic_lr, cfg.adam_beta1, cfg.adam_beta2);
                Critic::Scalar { net, opt }
            }
        };
        Ok(Self {
            cfg,
            env,
            policy,
            policy_opt,
            critic,
            rng,
            iteration: 0,
            update: 0,
            start: Instant::now(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn set_eval_episodes(&mut self, episodes: usize) -> Result<()> {
        if episodes == 0 {
            return Err(Error::config("eval_episodes", "must be positive"));
        }
        self.cfg.eval_episodes = episodes;
        Ok(())
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn critic(&self) -> &Critic {
        &self.critic
    }

    pub fn flow_net(&self) -> Option<&FlowNet> {
        match &self.critic {
            Critic::Flow { net, .. } => Some(net),
            Critic::Scalar { .. } => None,
        }
    }

    fn noise<R: Rng + ?Sized>(scheme: NoiseScheme, k: usize, rng: &mut R) -> Vec<f64> {
        match scheme {
            NoiseScheme::Iid => iid_normal(k, rng),
            NoiseScheme::Stratified => stratified_normal(k, rng),
        }
    }

    /// Predicted return distribution at `obs` using a private generator
    /// seeded with `seed`; does not disturb the training stream.
    pub fn predict_distribution(&self, obs: &[f64], steps: usize, seed: u64) -> Result<QuantileDistribution> {
        let net = self
            .flow_net()
            .ok_or_else(|| Error::InvalidArgument("scalar critic has no distribution".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Self::noise(self.cfg.noise_scheme, self.cfg.k, &mut rng);
        let h = net.try_encode(obs)?;
        sample_distribution_from_noise(net, &h, &noise, steps)
    }

    /// Scalar value estimate at `obs` (distribution mean for the flow critic).
    pub fn predict_value(&self, obs: &[f64], seed: u64) -> Result<f64> {
        match &self.critic {
            Critic::Flow { .. } => Ok(self.predict_distribution(obs, self.cfg.inference_steps, seed)?.mean()),
            Critic::Scalar { net, .. } => Ok(net.value(obs)),
        }
    }

    fn collect_rollout(&mut self) -> Result<TrajectoryBatch> {
        let mut batch = TrajectoryBatch::default();
        let mut state = self.env.reset();
        let mut ep_return = 0.0;
        for step in 0..self.cfg.rollout_steps {
            let out = self.policy.output(&state.observation);
            let a = out.sample(&mut self.rng);
            let tr = self.env.step(a, &mut self.rng)?;
            let r = tr.reward.noisy();
            ep_return += r;
            batch.obs.push(state.observation.clone());
            batch.actions.push(a);
            batch.log_probs.push(out.log_prob(a));
            batch.rewards.push(r);
            let last = step + 1 == self.cfg.rollout_steps;
            if tr.terminal {
                batch.ends.push(StepEnd::Terminal);
            } else if tr.truncated || last {
                batch.ends.push(StepEnd::Truncated(tr.state.observation.clone()));
            } else {
                batch.ends.push(StepEnd::Continue);
            }
            if tr.terminal || tr.truncated {
                batch.episode_returns.push(ep_return);
                ep_return = 0.0;
                if !last {
                    state = self.env.reset();
                }
            } else {
                state = tr.state;
            }
        }
        Ok(batch)
    }

    fn flow_targets(&mut self, batch: &mut TrajectoryBatch) -> Result<()> {
        let Critic::Flow { net, .. } = &self.critic else {
            unreachable!("flow targets need the flow critic")
        };
        let (k, steps, scheme) = (self.cfg.k, self.cfg.inference_steps, self.cfg.noise_scheme);
        let predict = |obs: &[f64], rng: &mut ChaCha8Rng| -> Result<Vec<f64>> {
            let noise = Self::noise(scheme, k, rng);
            let h = net.encode(obs);
            Ok(sample_distribution_from_noise(net, &h, &noise, steps)?.into_supports())
        };
        batch.predicted = batch
            .obs
            .iter()
            .map(|o| predict(o, &mut self.rng))
            .collect::<Result<_>>()?;
        let ends: Vec<StepEnd<Vec<f64>>> = batch
            .ends
            .iter()
            .map(|e| match e {
                StepEnd::Truncated(next) => predict(next, &mut self.rng).map(StepEnd::Truncated),
                StepEnd::Continue => Ok(StepEnd::Continue),
                StepEnd::Terminal => Ok(StepEnd::Terminal),
            })
            .collect::<Result<_>>()?;
        let adv = dist_gae_backward(&batch.rewards, &batch.predicted, &ends, &self.cfg.gae())?;
        batch.targets = batch
            .predicted
            .iter()
            .zip(&adv)
            .map(|(p, a)| target_returns(p, a))
            .collect::<Result<_>>()?;
        batch.advantages = adv.into_iter().map(|a| a.values).collect();
        if self.cfg.target_pooling == TargetPooling::ByState {
            let mut groups: HashMap<Vec<u64>, Vec<usize>> = HashMap::new();
            for (i, o) in batch.obs.iter().enumerate() {
                groups.entry(obs_key(o)).or_default().push(i);
            }
            let mut pooled = batch.targets.clone();
            for idx in groups.values() {
                let sets: Vec<&[f64]> = idx.iter().map(|&i| batch.targets[i].as_slice()).collect();
                let p = pool_quantiles(&sets, k)?;
                for &i in idx {
                    pooled[i] = p.clone();
                }
            }
            batch.targets = pooled;
        }
        Ok(())
    }

    fn minibatches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for _ in 0..self.cfg.critic_epochs {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut self.rng);
            out.extend(idx.chunks(self.cfg.critic_batch).map(|c| c.to_vec()));
        }
        out
    }

    fn wall_time(&self) -> f64 {
        if self.cfg.log_wall_time {
            self.start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    fn flow_update(
        &mut self,
        batch: &TrajectoryBatch,
        idx: &[usize],
    ) -> Result<(LossBreakdown, f64)> {
        let cfg = self.cfg.clone();
        let Critic::Flow { net, opt } = &mut self.critic else {
            unreachable!("flow update needs the flow critic")
        };
        net.power_iterate(cfg.power_iters);
        let mut samples = Vec::with_capacity(idx.len());
        let mut w_sum = 0.0;
        for &i in idx {
            let obs = &batch.obs[i];
            let target = &batch.targets[i];
            let h = net.encode(obs);
            let w_conf = if cfg.use_conf_weight {
                let z0: f64 = self.rng.sample(StandardNormal);
                let trace = jacobian_sensitivity(net, z0, &h, cfg.jacobian_steps)?;
                confidence_weight(&trace, cfg.tau_temp)?
            } else {
                1.0
            };
            w_sum += w_conf;
            let x0: f64 = self.rng.sample(StandardNormal);
            let u: f64 = self.rng.random();
            let x1 = couple(x0, target, cfg.coupling, u);
            let t: f64 = self.rng.random();
            let t_cons: f64 = self.rng.random();
            let risk_noise = Self::noise(cfg.noise_scheme, cfg.k, &mut self.rng);
            samples.push(CriticSample {
                obs: obs.clone(),
                target: target.clone(),
                w_conf,
                anchor: None,
                x0,
                x1,
                t,
                t_cons,
                risk_noise,
            });
        }
        let opts = CriticOptions {
            tail: cfg.tail_spec()?,
            risk_steps: if cfg.risk_on_solved { cfg.inference_steps } else { 1 },
            skip_unused_tail: false,
        };
        let (loss, grads) = critic_loss_and_grad(net, &samples, &opts, &cfg.loss_weights())?;
        if !loss.total.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite {
                what: "critic loss",
                step: self.update,
            });
        }
        opt.step(net, &grads)?;
        Ok((loss, w_sum / idx.len() as f64))
    }

    /// One full iteration. Metric rows go to `writer` when given.
    pub fn step(&mut self, mut writer: Option<&mut MetricsWriter>) -> Result<IterationStats> {
        let mut batch = self.collect_rollout()?;
        let n = batch.obs.len();
        let mut stats = IterationStats {
            noisy_train_return: if batch.episode_returns.is_empty() {
                None
            } else {
                Some(batch.episode_returns.iter().sum::<f64>() / batch.episode_returns.len() as f64)
            },
            ..Default::default()
        };

        let scalar_adv: Vec<f64> = match self.cfg.mode {
            CriticMode::Dfpo => {
                self.flow_targets(&mut batch)?;
                batch
                    .advantages
                    .iter()
                    .map(|a| scalarize(&crate::gae::DistAdvantage { values: a.clone() }))
                    .collect()
            }
            CriticMode::Scalar => {
                let Critic::Scalar { net, .. } = &self.critic else { unreachable!() };
                let values: Vec<f64> = batch.obs.iter().map(|o| net.value(o)).collect();
                let ends: Vec<StepEnd<f64>> = batch
                    .ends
                    .iter()
                    .map(|e| match e {
                        StepEnd::Continue => StepEnd::Continue,
                        StepEnd::Terminal => StepEnd::Terminal,
                        StepEnd::Truncated(o) => StepEnd::Truncated(net.value(o)),
                    })
                    .collect();
                let adv = scalar_gae(&batch.rewards, &values, &ends, &self.cfg.gae())?;
                batch.targets = adv.iter().zip(&values).map(|(a, v)| vec![a + v]).collect();
                adv
            }
        };
        stats.mean_scalar_adv = scalar_adv.iter().sum::<f64>() / n as f64;

        let mut w_total = 0.0;
        for idx in self.minibatches(n) {
            let (loss, w_conf) = match self.cfg.mode {
                CriticMode::Dfpo => self.flow_update(&batch, &idx)?,
                CriticMode::Scalar => {
                    let Critic::Scalar { net, opt } = &mut self.critic else { unreachable!() };
                    let obs: Vec<Vec<f64>> = idx.iter().map(|&i| batch.obs[i].clone()).collect();
                    let tgt: Vec<f64> = idx.iter().map(|&i| batch.targets[i][0]).collect();
                    let mse = net.update(opt, &obs, &tgt)?;
                    if !mse.is_finite() {
                        return Err(Error::NonFinite {
                            what: "critic loss",
                            step: self.update,
                        });
                    }
                    let l = LossBreakdown {
                        total: mse,
                        ..Default::default()
                    };
                    (l, 1.0)
                }
            };
            w_total += w_conf;
            if let Some(w) = writer.as_mut() {
                let flow = self.cfg.mode == CriticMode::Dfpo;
                let opt_if = |v: f64| if flow { Some(v) } else { None };
                w.write(&MetricsRow {
                    kind: "update",
                    iteration: self.iteration,
                    update: self.update,
                    udcfm: opt_if(loss.udcfm),
                    bcfm: opt_if(loss.bcfm),
                    cons: opt_if(loss.cons),
                    risk: opt_if(loss.risk),
                    shape: opt_if(loss.shape),
                    total: Some(loss.total),
                    mean_w_conf: opt_if(w_conf),
                    mean_scalar_adv: Some(stats.mean_scalar_adv),
                    clean_eval_return: None,
                    noisy_train_return: stats.noisy_train_return,
                    wall_time: self.wall_time(),
                })?;
            }
            stats.losses.push(loss);
            self.update += 1;
        }
        stats.mean_w_conf = if stats.losses.is_empty() { 0.0 } else { w_total / stats.losses.len() as f64 };

        let pbatch = PolicyBatch {
            obs: batch.obs,
            actions: batch.actions,
            old_log_probs: batch.log_probs,
            advantages: scalar_adv,
        };
        policy_update(&mut self.policy, &mut self.policy_opt, &pbatch, &self.cfg.ppo(), self.iteration)?;

        self.iteration += 1;
        if self.cfg.eval_every > 0 && self.iteration.is_multiple_of(self.cfg.eval_every) {
            let ev = self.evaluate(self.eval_seed(), false)?;
            if let Some(w) = writer.as_mut() {
                w.write(&MetricsRow {
                    kind: "eval",
                    iteration: self.iteration - 1,
                    update: self.update,
                    clean_eval_return: Some(ev.mean_return),
                    wall_time: self.wall_time(),
                    ..Default::default()
                })?;
            }
            stats.eval = Some(ev);
        }
        Ok(stats)
    }

    fn eval_seed(&self) -> u64 {
        self.cfg
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.iteration as u64)
            ^ 0xD1B5_4A32_D192_ED03
    }

    /// Clean-return evaluation of the current policy (sampling actions) on a
    /// fresh environment, optionally under the OOD observation transform.
    pub fn evaluate(&self, seed: u64, ood: bool) -> Result<EvalStats> {
        let mut env = make_env(&self.cfg.env_kind()?, self.cfg.noise())?;
        let transform = if ood {
            Some(OodTransform::new(env.obs_dim(), seed ^ 0x00D0_0D00))
        } else {
            None
        };
        let policy = &self.policy;
        evaluate(
            env.as_mut(),
            |obs, rng| policy.output(obs).sample(rng),
            self.cfg.eval_episodes,
            self.cfg.gamma,
            seed,
            transform.as_ref(),
        )
    }

    /// Snapshot of everything needed to continue bit-exactly.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.set_meta("config", self.cfg.to_text());
        c.set_meta("iteration", self.iteration);
        c.set_meta("update", self.update);
        c.push_rng("rng", &self.rng);
        c.push_model("policy", &self.policy);
        push_adam(&mut c, "policy_opt", &self.policy_opt);
        match &self.critic {
            Critic::Flow { net, opt } => {
                c.push_model("critic", net);
                push_adam(&mut c, "critic_opt", opt);
            }
            Critic::Scalar { net, opt } => {
                c.push_model("critic", net);
                push_adam(&mut c, "critic_opt", opt);
            }
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cfg = RunConfig::from_text(c.meta("config")?)?;
        let mut t = Self::new(cfg)?;
        let parse = |k: &str| -> Result<usize> {
            c.meta(k)?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad checkpoint field {k}")))
        };
        t.iteration = parse("iteration")?;
        t.update = parse("update")?;
        t.rng = c.restore_rng("rng")?;
        c.restore_model("policy", &mut t.policy)?;
        restore_adam(c, "policy_opt", &mut t.policy_opt)?;
        match &mut t.critic {
            Critic::Flow { net, opt } => {
                c.restore_model("critic", net)?;
                restore_adam(c, "critic_opt", opt)?;
            }
            Critic::Scalar { net, opt } => {
                c.restore_model("critic", net)?;
                restore_adam(c, "critic_opt", opt)?;
            }
        }
        Ok(t)
    }
}

fn push_adam(c: &mut Checkpoint, prefix: &str, opt: &Adam) {
    let (step, m, v) = opt.state();
    c.set_meta(&format!("{prefix}.step"), step);
    for (i, a) in m.iter().enumerate() {
        c.push(format!("{prefix}.m.{i}"), a);
    }
    for (i, a) in v.iter().enumerate() {
        c.push(format!("{prefix}.v.{i}"), a);
    }
}

fn restore_adam(c: &Checkpoint, prefix: &str, opt: &mut Adam) -> Result<()> {
    let step: u64 = c
        .meta(&format!("{prefix}.step"))?
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad {prefix}.step")))?;
    let (_, m0, _) = opt.state();
    let n = m0.len();
    let fetch = |kind: &str| -> Result<Vec<Vec<f64>>> {
        (0..n)
            .map(|i| {
                let key = format!("{prefix}.{kind}.{i}");
                c.get(&key)
                    .map(|a| a.to_vec())
                    .ok_or_else(|| Error::InvalidArgument(format!("checkpoint is missing `{key}`")))
            })
            .collect()
    };
    opt.restore(step, fetch("m")?, fetch("v")?)
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub history: Vec<IterationStats>,
    pub metrics_path: Option<PathBuf>,
}

/// Run `cfg.iterations` iterations from scratch (or from `resume`). With an
/// output directory, writes `metrics.csv`, `config.cfg` and `final.ckpt`; a
/// non-finite loss writes `diverged.ckpt` before returning the error.
pub fn train(cfg: RunConfig, out_dir: Option<&Path>, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(c) => {
            let mut t = Trainer::from_checkpoint(c)?;
            t.cfg.iterations = cfg.iterations;
            t
        }
        None => Trainer::new(cfg)?,
    };
    let mut writer = None;
    let mut metrics_path = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        writer = Some(match resume.and_then(|c| c.meta("metrics_len").ok()) {
            Some(len) if path.exists() => {
                let len = len
                    .parse()
                    .map_err(|_| Error::InvalidArgument("bad metrics_len".into()))?;
                MetricsWriter::resume(&path, len)?
            }
            _ => MetricsWriter::create(&path)?,
        });
        let cfg_path = dir.join("config.cfg");
        std::fs::write(&cfg_path, trainer.cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
        metrics_path = Some(path);
    }
    let mut history = Vec::new();
    while trainer.iteration < trainer.cfg.iterations {
        match trainer.step(writer.as_mut()) {
            Ok(s) => history.push(s),
            Err(e) => {
                if let Some(dir) = out_dir {
                    if let Some(w) = writer.as_mut() {
                        w.flush()?;
                    }
                    trainer.checkpoint().save(&dir.join("diverged.ckpt"))?;
                }
                return Err(e);
            }
        }
    }
    if let Some(dir) = out_dir {
        let mut ckpt = trainer.checkpoint();
        if let Some(w) = writer.as_mut() {
            ckpt.set_meta("metrics_len", w.flush()?);
        }
        ckpt.save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome {
        trainer,
        history,
        metrics_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            iterations: 2,
            rollout_steps: 16,
            critic_batch: 8,
            critic_epochs: 1,
            k: 8,
            head_hidden: vec![8],
            encoder_hidden: vec![8],
            state_dim: 4,
            policy_hidden: vec![8],
            eval_every: 1,
            eval_episodes: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let mut cfg = tiny();
        cfg.iterations = 0;
        let out = train(cfg.clone(), None, None).unwrap();
        let fresh = Trainer::new(cfg).unwrap();
        assert_eq!(out.trainer.checkpoint(), fresh.checkpoint());
    }

    #[test]
    fn training_never_reads_clean_rewards() {
        let mut cfg = tiny();
        cfg.eval_every = 0;
        crate::envs::reset_reward_counters();
        train(cfg, None, None).unwrap();
        let (clean, noisy) = crate::envs::reward_read_counts();
        assert_eq!(clean, 0);
        assert_eq!(noisy, 32);
    }

    #[test]
    fn scalar_mode_runs() {
        let mut cfg = tiny();
        cfg.mode = CriticMode::Scalar;
        let out = train(cfg, None, None).unwrap();
        assert_eq!(out.history.len(), 2);
    }
}
