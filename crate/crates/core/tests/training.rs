use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use valueflow::config::{load_config, RunConfig};
use valueflow::envs::{make_env_by_name, BimodalBandit, NoiseMode, NoiseSpec, NoisyChain};
use valueflow::experiments::{bimodal_targets, resume_matches};
use valueflow::flow::{FlowNet, FlowShape};
use valueflow::losses::{critic_loss_and_grad, CriticOptions, CriticSample, LossWeights, TailSpec};
use valueflow::net::Adam;
use valueflow::policy::ScalarCritic;
use valueflow::trainer::{train, Trainer};
use valueflow::Error;

fn small(cfg: RunConfig) -> RunConfig {
    RunConfig {
        rollout_steps: 64,
        critic_batch: 64,
        head_hidden: vec![32, 32],
        eval_every: 0,
        ..cfg
    }
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(RunConfig {
        iterations: 4,
        eval_every: 2,
        eval_episodes: 4,
        ..RunConfig::default()
    });
    let run = |name: &str, cfg: RunConfig| {
        let out = train(cfg, Some(&dir.path().join(name)), None).unwrap();
        std::fs::read(out.metrics_path.unwrap()).unwrap()
    };
    let a = run("a", cfg.clone());
    let b = run("b", cfg.clone());
    assert_eq!(a, b);
    let c = run("c", RunConfig { seed: 1, ..cfg });
    assert_ne!(a, c);
}

#[test]
fn resume_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for env in ["noisy-chain", "cliff-grid"] {
        let cfg = small(RunConfig {
            env: env.into(),
            iterations: 6,
            ..RunConfig::default()
        });
        assert!(resume_matches(&cfg, &dir.path().join(env)).unwrap(), "{env}");
    }
    let scalar = small(RunConfig {
        mode: "scalar".parse().unwrap(),
        iterations: 6,
        ..RunConfig::default()
    });
    assert!(resume_matches(&scalar, &dir.path().join("scalar")).unwrap());
}

#[test]
fn checkpoint_round_trip_restores_predictions() {
    let out = train(small(RunConfig { iterations: 2, ..RunConfig::default() }), None, None).unwrap();
    let t = &out.trainer;
    let back = Trainer::from_checkpoint(&t.checkpoint()).unwrap();
    let obs = t.config().env_kind().unwrap().state_observation(2).unwrap();
    assert_eq!(
        t.predict_distribution(&obs, 3, 9).unwrap(),
        back.predict_distribution(&obs, 3, 9).unwrap()
    );
}

#[test]
fn critic_loss_halves_within_fifty_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = FlowShape {
        head_hidden: vec![32, 32],
        ..FlowShape::with_obs_dim(1)
    };
    let mut net = FlowNet::new(shape, &mut rng).unwrap();
    let mut adam = Adam::for_model(&net, 1e-2, 0.9, 0.999);
    let target = bimodal_targets(50);
    let batch: Vec<CriticSample> = (0..32)
        .map(|i| {
            let x0: f64 = rng.sample(rand_distr::StandardNormal);
            CriticSample {
                obs: vec![1.0],
                target: target.clone(),
                w_conf: 1.0,
                anchor: None,
                x0,
                x1: target[i % 50],
                t: rng.random(),
                t_cons: rng.random(),
                risk_noise: valueflow::flow::stratified_normal(50, &mut rng),
            }
        })
        .collect();
    let opts = CriticOptions {
        tail: TailSpec::new(0.1, 0.1, 50).unwrap(),
        risk_steps: 1,
        skip_unused_tail: false,
    };
    let w = LossWeights::default();
    let first = critic_loss_and_grad(&net, &batch, &opts, &w).unwrap().0.total;
    for _ in 0..50 {
        let (_, g) = critic_loss_and_grad(&net, &batch, &opts, &w).unwrap();
        adam.step(&mut net, &g).unwrap();
    }
    let last = critic_loss_and_grad(&net, &batch, &opts, &w).unwrap().0.total;
    assert!(last <= 0.5 * first, "{first} -> {last}");
}

#[test]
fn scalar_critic_fits_chain_values() {
    // Regress each chain state onto its optimal discounted value.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 5;
    let gamma: f64 = 0.99;
    let mut critic = ScalarCritic::new(n, &[32, 32], &mut rng).unwrap();
    let mut adam = Adam::for_model(&critic, 3e-3, 0.9, 0.999);
    let obs: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let targets: Vec<f64> = (0..n).map(|i| gamma.powi((n - 1 - i) as i32)).collect();
    for _ in 0..1500 {
        critic.update(&mut adam, &obs, &targets).unwrap();
    }
    for (o, t) in obs.iter().zip(&targets) {
        assert!((critic.value(o) - t).abs() < 1e-2, "{} vs {t}", critic.value(o));
    }
}

#[test]
fn dfpo_learns_chain_start_value() {
    let cfg = small(RunConfig {
        iterations: 500,
        ..RunConfig::default()
    });
    let out = train(cfg, None, None).unwrap();
    let t = &out.trainer;
    let start = t.config().env_kind().unwrap().state_observation(0).unwrap();
    let v = t.predict_value(&start, 0).unwrap();
    let truth = NoisyChain::optimal_start_value(5, 0.99);
    assert!((truth - 0.99f64.powi(4)).abs() < 1e-15);
    assert!((v - truth).abs() <= 0.1 * truth, "value {v} vs {truth}");
}

#[test]
fn bandit_mean_under_uniform_actions() {
    let noise = NoiseSpec::new(0.0, NoiseMode::SignFlip).unwrap();
    let mut env = make_env_by_name("bimodal-bandit", noise).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 20_000;
    let mut sum = 0.0;
    for _ in 0..n {
        env.reset();
        let a = rng.random_range(0..env.n_actions());
        let tr = env.step(a, &mut rng).unwrap();
        assert!(tr.terminal);
        sum += tr.reward.clean();
    }
    let mean = sum / n as f64;
    // Payoffs -1 and 3 with equal odds: mean 1, standard deviation 2.
    assert_eq!(BimodalBandit::true_mean(-1.0, 3.0, 0.5), 1.0);
    assert!((mean - 1.0).abs() < 4.0 * 2.0 / (n as f64).sqrt(), "mean {mean}");
}

#[test]
fn empty_config_file_gives_documented_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.cfg");
    std::fs::write(&path, "").unwrap();
    let cfg = load_config(&path).unwrap();
    assert_eq!(cfg, RunConfig::default());
    let w = cfg.loss_weights();
    assert_eq!((w.reg, w.cons, w.risk, w.shape), (0.1, 0.01, 0.5, 0.5));
    assert_eq!((cfg.gamma, cfg.gae_lambda, cfg.k), (0.99, 0.95, 50));
    assert_eq!((cfg.clip_eps, cfg.entropy_coef, cfg.critic_lr), (0.2, 0.01, 3e-4));
}

#[test]
fn config_errors_name_the_key() {
    let err = |text: &str| RunConfig::from_text(text).and_then(|c| c.validate().map(|_| c)).unwrap_err();
    match err("alpha = 1.5") {
        Error::Config { key, .. } => assert_eq!(key, "alpha"),
        other => panic!("unexpected {other}"),
    }
    match err("no_such_key = 3") {
        Error::Config { key, .. } => assert_eq!(key, "no_such_key"),
        other => panic!("unexpected {other}"),
    }
    let ok = RunConfig::from_text("inference_steps = 20\n# comment\n").unwrap();
    ok.validate().unwrap();
    assert_eq!(ok.inference_steps, 20);
}
