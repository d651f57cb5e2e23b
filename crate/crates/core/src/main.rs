use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use valueflow::ablation::{run_ablation, AblationMatrix};
use valueflow::checkpoint::Checkpoint;
use valueflow::config::{load_config, RunConfig};
use valueflow::flow::{solve_ivp_recorded, stratified_normal, QuantileDistribution, VectorField};
use valueflow::metrics::{write_flow_dump, write_histogram_csv, write_quantiles_csv, write_velocity_grid, FlowRecord};
use valueflow::trainer::{train, Trainer};
use valueflow::verify::{verify, VerifyOptions};
use valueflow::Error;

/// Distributional flow value critic with PPO on noisy-reward environments.
#[derive(Parser)]
#[command(name = "valueflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a configuration; writes metrics.csv, config.cfg and final.ckpt.
    Train(TrainArgs),
    /// Evaluate the policy stored in a checkpoint on clean rewards.
    Eval(EvalArgs),
    /// Run the property and gradient-check suites; nonzero exit on failure.
    Verify(VerifyArgs),
    /// Run an ablation matrix, one training run per cell.
    Ablate(AblateArgs),
    /// Integrate the flow head of a checkpoint for one state and write
    /// trajectory, quantile, histogram and velocity-grid files.
    ExportFlow(ExportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra key=value overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => RunConfig::default(),
        };
        for pair in &self.set {
            let Some((k, v)) = pair.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{pair}`");
            };
            cfg.set(k.trim(), v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, env = "VALUEFLOW_OUT_DIR", default_value = "runs/latest")]
    out_dir: PathBuf,
    /// Continue from a checkpoint written by an earlier run into the same
    /// output directory. The configuration stored in the checkpoint is used;
    /// only the iteration count is taken from the command line.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of episodes; defaults to the checkpoint's eval_episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Apply the fixed random orthogonal observation transform.
    #[arg(long)]
    ood: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per suite.
    #[arg(long, default_value_t = 100)]
    instances: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Built-in matrix: loss-components, sampling-steps, risk-interval,
    /// consistency-weight.
    #[arg(long, conflicts_with = "matrix")]
    preset: Option<String>,
    /// Matrix file, one `name: key=value ...` cell per line.
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long, env = "VALUEFLOW_OUT_DIR", default_value = "runs/ablation")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Euler steps; every particle yields steps + 1 records.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 50)]
    particles: usize,
    /// Environment state whose distribution is exported.
    #[arg(long, default_value_t = 0)]
    state_index: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, env = "VALUEFLOW_OUT_DIR", default_value = "runs/export")]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::ExportFlow(a) => cmd_export(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = matches!(e.downcast_ref::<Error>(), Some(Error::Config { .. }));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let cfg = a.config.resolve()?;
    let resume = a
        .resume
        .as_deref()
        .map(Checkpoint::load)
        .transpose()
        .context("loading resume checkpoint")?;
    let out = train(cfg, Some(&a.out_dir), resume.as_ref())?;
    let t = &out.trainer;
    let eval = t.evaluate(valueflow::ablation::final_eval_seed(t.config().seed), false)?;
    println!(
        "trained {} iterations; final clean return {:.4} (std {:.4}); outputs in {}",
        t.iteration(),
        eval.mean_return,
        eval.std_return,
        a.out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut trainer = Trainer::from_checkpoint(&ckpt)?;
    if let Some(n) = a.episodes {
        trainer.set_eval_episodes(n)?;
    }
    let seed = a.seed.unwrap_or(trainer.config().seed);
    let s = trainer.evaluate(seed, a.ood)?;
    let line = serde_json::json!({
        "iteration": trainer.iteration(),
        "episodes": s.episodes,
        "ood": a.ood,
        "mean_return": s.mean_return,
        "std_return": s.std_return,
        "q10": s.q10,
        "q50": s.q50,
        "q90": s.q90,
    });
    println!("{line}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: VerifyArgs) -> anyhow::Result<ExitCode> {
    let report = verify(&VerifyOptions {
        seed: a.seed,
        instances: a.instances,
    })?;
    print!("{report}");
    Ok(if report.all_passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_ablate(a: AblateArgs) -> anyhow::Result<ExitCode> {
    let base = a.config.resolve()?;
    let matrix = match (&a.preset, &a.matrix) {
        (Some(p), None) => AblationMatrix::preset(p)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            AblationMatrix::parse(&text)?
        }
        _ => bail!("ablate needs exactly one of --preset or --matrix"),
    };
    let outcomes = run_ablation(&base, &matrix, &a.out_dir)?;
    for o in &outcomes {
        match (o.final_clean_return, &o.error) {
            (Some(r), _) => println!("{:<20} ok      clean return {r:.4}", o.cell),
            (None, Some(e)) => println!("{:<20} failed  {e}", o.cell),
            _ => {}
        }
    }
    println!("summary: {}", a.out_dir.join("summary.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_export(a: ExportArgs) -> anyhow::Result<ExitCode> {
    if a.particles < 2 {
        bail!("--particles must be at least 2");
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let trainer = Trainer::from_checkpoint(&ckpt)?;
    let Some(net) = trainer.flow_net() else {
        bail!("checkpoint holds a scalar critic; export-flow needs the flow critic");
    };
    let obs = trainer.config().env_kind()?.state_observation(a.state_index)?;
    let h = net.try_encode(&obs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut noise = stratified_normal(a.particles, &mut rng);
    noise.sort_by(f64::total_cmp);

    let mut records = Vec::with_capacity(a.particles * (a.steps + 1));
    let mut terminal = Vec::with_capacity(a.particles);
    for (k, &z0) in noise.iter().enumerate() {
        let path = solve_ivp_recorded(net, z0, &h, a.steps)?;
        terminal.push(path.last().expect("at least one point").z);
        records.extend(path.into_iter().map(|p| FlowRecord {
            state: a.state_index,
            k,
            t: p.t,
            z: p.z,
            v: p.v,
        }));
    }
    let dist = QuantileDistribution::from_unsorted(terminal);

    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let dir = a.out_dir.as_path();
    write_flow_dump(&dir.join("flow_dump.jsonl"), &records)?;
    write_quantiles_csv(&dir.join("quantiles.csv"), dist.supports())?;
    write_histogram_csv(&dir.join("histogram.csv"), dist.supports(), a.bins)?;
    write_velocity_grid(&dir.join("velocity_grid.csv"), &velocity_grid(net, &h, &records, a.steps))?;
    println!(
        "exported {} records for state {} (mean {:.4}) to {}",
        records.len(),
        a.state_index,
        dist.mean(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Velocity on a 41 x (steps + 1) grid spanning the exported trajectories.
fn velocity_grid<F: VectorField + ?Sized>(field: &F, h: &[f64], records: &[FlowRecord], steps: usize) -> Vec<(f64, f64, f64)> {
    let lo = records.iter().map(|r| r.z).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.z).fold(f64::NEG_INFINITY, f64::max);
    let pad = 0.1 * (hi - lo).max(1e-3);
    let (lo, hi) = (lo - pad, hi + pad);
    let nz = 41;
    let mut rows = Vec::with_capacity(nz * (steps + 1));
    for n in 0..=steps {
        let t = n as f64 / steps as f64;
        for i in 0..nz {
            let z = lo + (hi - lo) * i as f64 / (nz - 1) as f64;
            rows.push((z, t, field.velocity(z, t, h)));
        }
    }
    rows
}
