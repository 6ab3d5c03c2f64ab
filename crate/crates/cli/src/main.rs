use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vsrl_core::diagnostics::{
    holder_exponent, log_spaced_scales, lyapunov_exponent, objective_slice, policy_return,
    random_direction, value_estimation_error, ClosedLoop, EvalContext, LyapunovConfig, SliceConfig,
};
use vsrl_core::harness::{
    emit_plot_data, load_checkpoint, load_runs, parse_config_from, resume_training, run_ablation,
    run_training, ExperimentConfig, Grid, TrainingState,
};
use vsrl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "vsrl", about = "Policy-gradient experiments on small control tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override, `key=value`; may repeat.
    #[arg(long = "set", short = 's')]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut base = ExperimentConfig::default();
        if let Ok(seed) = std::env::var("VSRL_SEED") {
            base.set("seeds", &seed)?;
        }
        parse_config_from(base, self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per configured seed.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue an interrupted run directory instead of starting fresh.
        #[arg(long, conflicts_with_all = ["config", "overrides"])]
        resume: Option<PathBuf>,
    },
    /// Run a grid of configurations across all seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Grid, e.g. `value_steps=1,10,50;gae_lambda=0.95,1.0`.
        #[arg(long)]
        grid: String,
    },
    /// Value-estimation error, objective slice and Lyapunov exponent of a checkpoint.
    Diagnose {
        checkpoint: PathBuf,
        /// Output directory for CSV dumps (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        eta_starts: usize,
        #[arg(long, default_value_t = 41)]
        slice_points: usize,
        #[arg(long, default_value_t = 1.0)]
        slice_width: f64,
        #[arg(long, default_value_t = 4)]
        rollouts_per_point: usize,
        #[arg(long, default_value_t = 10_000)]
        lyapunov_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate runs under a directory and export plot data.
    Report {
        dir: PathBuf,
        /// Metrics field to export, e.g. `mean_return` or `eta_abs_mean`.
        #[arg(long, default_value = "mean_return")]
        quantity: String,
        /// CSV path (defaults to `<dir>/<quantity>.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Checkpoint(_) => 3,
        e if e.is_numerical() => 2,
        _ => 1,
    }
}

fn train(config: &ExperimentConfig) -> Result<bool> {
    let mut all_ok = true;
    for &seed in &config.seeds {
        let dir = config.output_dir.join(format!("seed_{seed}"));
        let outcome = run_training(config, seed, &dir)?;
        report_run(&outcome);
        all_ok &= outcome.succeeded();
    }
    Ok(all_ok)
}

fn report_run(outcome: &vsrl_core::harness::RunOutcome) {
    let last = outcome.metrics.iter().rev().find_map(|r| r.mean_return);
    match &outcome.failure {
        None => println!(
            "seed {}: {} iterations, last eval return {}",
            outcome.seed,
            outcome.metrics.len(),
            last.map_or("n/a".into(), |v| format!("{v:.2}"))
        ),
        Some(f) => println!("seed {}: FAILED ({f}); partial metrics in {}", outcome.seed, outcome.run_dir.display()),
    }
}

#[allow(clippy::too_many_arguments)]
fn diagnose(
    checkpoint: &Path,
    out: &Path,
    eta_starts: usize,
    slice_points: usize,
    slice_width: f64,
    rollouts_per_point: usize,
    lyapunov_steps: usize,
    seed: u64,
) -> Result<()> {
    let state = TrainingState::from_checkpoint(&load_checkpoint(checkpoint)?)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg = &state.config;
    let policy = &state.learner.policy;
    let normalize = |o: &[f64]| state.collector.normalize(o);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let ctx = EvalContext {
        env: cfg.env,
        gamma: cfg.gamma,
        normalize: &normalize,
        value_scale: state.collector.reward_scale(),
    };
    let horizon = vsrl_core::diagnostics::effective_horizon(cfg.gamma);
    let eval = value_estimation_error(policy, &state.learner.value, &ctx, eta_starts, horizon, &mut rng)?;
    let (eta_mean, eta_abs, eta_std) = eval.eta_summary();
    let mut csv = String::from("start_index,eta\n");
    for (i, e) in eval.etas.iter().enumerate() {
        let _ = writeln!(csv, "{i},{e}");
    }
    write(&out.join("eta.csv"), &csv)?;
    println!("eta: mean {eta_mean:.4}, mean |eta| {eta_abs:.4}, std {eta_std:.4} over {eta_starts} starts");
    println!("deterministic return: {:.3}", eval.mean_episode_return());

    let slice_cfg = SliceConfig {
        env: cfg.env,
        normalize: &normalize,
        rollouts_per_point,
        seed,
        gamma: None,
    };
    let direction = random_direction(policy.mean_net.params.len(), &mut rng);
    let grid: Vec<f64> = (0..slice_points)
        .map(|i| slice_width * (2.0 * i as f64 / (slice_points.max(2) - 1) as f64 - 1.0))
        .collect();
    let slice = objective_slice(policy, &direction, &grid, &slice_cfg)?;
    let mut csv = String::from("h,J\n");
    for (h, j) in &slice {
        let _ = writeln!(csv, "{h},{j}");
    }
    write(&out.join("slice.csv"), &csv)?;
    println!("objective slice: {} points written", slice.len());

    let theta = policy.mean_net.params.as_slice().to_vec();
    let mut sampler = |p: &[f64]| policy_return(policy, p, &slice_cfg);
    match holder_exponent(&mut sampler, &theta, &direction, &log_spaced_scales(1e-1, 1e-4, 10)) {
        Ok(fit) => println!("holder exponent: {:.3} (r^2 {:.3})", fit.alpha, fit.r_squared),
        Err(e) => println!("holder exponent: unavailable ({e})"),
    }

    let system = ClosedLoop {
        env: cfg.env,
        policy,
        normalize: &normalize,
    };
    let s0 = cfg.env.initial_state(&mut rng);
    let lyap = lyapunov_exponent(
        &system,
        &s0,
        LyapunovConfig {
            steps: lyapunov_steps,
            ..Default::default()
        },
    )?;
    println!(
        "lyapunov exponent: {lyap:.4} per step ({:.4} per unit time); implied holder exponent {:.3}",
        lyap / cfg.env.dt,
        vsrl_core::algorithms::holder_alpha(cfg.gamma, lyap)
    );
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { resume: Some(dir), .. } => {
            let outcome = resume_training(&dir)?;
            report_run(&outcome);
            Ok(outcome.succeeded())
        }
        Command::Train { config, resume: None } => train(&config.resolve()?),
        Command::Ablate { config, grid } => {
            let cfg = config.resolve()?;
            let report = run_ablation(&cfg, &Grid::parse(&grid)?, &cfg.output_dir)?;
            print!("{}", report.to_table());
            Ok(report.cells.iter().all(|c| c.completed() == c.seeds.len()))
        }
        Command::Diagnose {
            checkpoint,
            out,
            eta_starts,
            slice_points,
            slice_width,
            rollouts_per_point,
            lyapunov_steps,
            seed,
        } => {
            let out = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
            diagnose(
                &checkpoint,
                &out,
                eta_starts,
                slice_points,
                slice_width,
                rollouts_per_point,
                lyapunov_steps,
                seed,
            )?;
            Ok(true)
        }
        Command::Report { dir, quantity, out } => {
            let (report, series) = load_runs(&dir)?;
            print!("{}", report.to_table());
            let path = out.unwrap_or_else(|| dir.join(format!("{quantity}.csv")));
            let agg = emit_plot_data(&series, &quantity, &path)?;
            println!("wrote {} and {}", path.display(), agg.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
