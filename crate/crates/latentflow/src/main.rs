use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use latentflow::config::{PolicyKind, RunConfig, Task};
use latentflow::error::{Error, Result};
use latentflow::harness::{
    cmd_eval, cmd_gen_demos, cmd_report, cmd_train_flow, cmd_train_latent, RunPaths,
};
use latentflow::metrics::s_smooth;

#[derive(Parser)]
#[command(
    name = "latentflow",
    version,
    about = "Trajectory-level latent flow policies on a planar-arm benchmark",
    long_about = "Generates scripted demonstrations, trains a two-stage latent flow policy \
                  (or its raw-action baseline), evaluates it closed-loop, and compares runs. \
                  Every run lives under <runs-root>/<config-hash>/ and is reproducible \
                  byte-for-byte from its config."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus the overrides worth reaching for from the shell. Any
/// field not exposed here is still settable through `--config`.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory that holds one subdirectory per run, named by config hash.
    #[arg(long, default_value = "runs")]
    runs_root: PathBuf,
    /// Task: reach, obstacle-reach, or pick-place.
    #[arg(long)]
    task: Option<String>,
    /// Policy: latent-flow or raw-flow.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_demos: Option<usize>,
    /// Std-dev of Gaussian noise added to expert joint commands.
    #[arg(long)]
    noise_level: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_seeds: Option<usize>,
    #[arg(long)]
    eval_trials: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(t) = &self.task {
            cfg.task = Task::parse(t).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown task {t:?} (expected reach, obstacle-reach, or pick-place)"
                ))
            })?;
        }
        if let Some(p) = &self.policy {
            cfg.policy = PolicyKind::parse(p).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown policy {p:?} (expected latent-flow or raw-flow)"
                ))
            })?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.num_demos {
            cfg.num_demos = v;
        }
        if let Some(v) = self.noise_level {
            cfg.noise_level = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.eval_seeds {
            cfg.eval_seeds = v;
        }
        if let Some(v) = self.eval_trials {
            cfg.eval_trials = v;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted demonstrations for the configured task.
    GenDemos(ConfigArgs),
    /// Stage 1: train the variational action model on the run's demos.
    TrainLatent(ConfigArgs),
    /// Stage 2: train the conditioned flow over the frozen representation.
    TrainFlow(ConfigArgs),
    /// Closed-loop evaluation of a trained run (seeds x trials).
    Eval(ConfigArgs),
    /// gen-demos, train-latent (latent policy only), train-flow, eval.
    Pipeline(ConfigArgs),
    /// Compare two or more evaluated runs against the raw-flow baseline.
    Report {
        /// Evaluated run directory (repeat for each run; at least two).
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Output directory for report.csv and the plot tables.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Smoothness metrics for one trajectory CSV (header row, time first).
    Metrics {
        /// CSV with a header; the first column is time, the rest are the
        /// trajectory coordinates the score is computed over.
        #[arg(long)]
        input: PathBuf,
        /// Seconds per row.
        #[arg(long, default_value_t = 0.05)]
        dt: f64,
        /// Low-pass cutoff for the spectral term, in Hz.
        #[arg(long, default_value_t = 2.5)]
        cutoff_hz: f64,
        /// Reference jerk scale anchoring the jerk term.
        #[arg(long)]
        jerk_ref: f64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDemos(args) => {
            let cfg = args.resolve()?;
            let manifest = cmd_gen_demos(&cfg, &args.runs_root)?;
            let paths = RunPaths::new(&args.runs_root, &cfg);
            println!(
                "wrote {} demos ({} attempts, {} rejected) under {}",
                manifest.num_demos,
                manifest.attempts,
                manifest.rejected,
                paths.demos_dir().display()
            );
        }
        Command::TrainLatent(args) => {
            let cfg = args.resolve()?;
            let out = cmd_train_latent(&cfg, &args.runs_root)?;
            println!(
                "stage 1 done: recon {:.4e} -> {:.4e} over {} epochs; frozen hash {}",
                out.first_recon,
                out.final_recon,
                out.epochs,
                &out.frozen_hash[..12]
            );
        }
        Command::TrainFlow(args) => {
            let cfg = args.resolve()?;
            let out = cmd_train_flow(&cfg, &args.runs_root)?;
            println!(
                "stage 2 done ({}): matching loss {:.4e} -> {:.4e} over {} epochs",
                cfg.policy.name(),
                out.first_fm,
                out.final_fm,
                out.epochs
            );
        }
        Command::Eval(args) => {
            let cfg = args.resolve()?;
            let record = cmd_eval(&cfg, &args.runs_root)?;
            let paths = RunPaths::new(&args.runs_root, &cfg);
            println!(
                "{} on {}: success {:.1}% +/- {:.1} over {} seeds x {} trials; mean smoothness {:.4}",
                record.policy,
                record.task,
                record.summary.mean_pct,
                record.summary.std_pct,
                record.summary.per_seed.len(),
                record.trials_per_seed,
                record.smooth_mean
            );
            println!("details: {}", paths.eval_record().display());
        }
        Command::Pipeline(args) => {
            let cfg = args.resolve()?;
            let manifest = cmd_gen_demos(&cfg, &args.runs_root)?;
            println!("demos: {} written", manifest.num_demos);
            if cfg.policy == PolicyKind::LatentFlow {
                let s1 = cmd_train_latent(&cfg, &args.runs_root)?;
                println!("stage 1: recon {:.4e} -> {:.4e}", s1.first_recon, s1.final_recon);
            }
            let s2 = cmd_train_flow(&cfg, &args.runs_root)?;
            println!("stage 2: matching loss {:.4e} -> {:.4e}", s2.first_fm, s2.final_fm);
            let record = cmd_eval(&cfg, &args.runs_root)?;
            let paths = RunPaths::new(&args.runs_root, &cfg);
            println!(
                "eval: {} on {} -> success {:.1}%, smoothness {:.4} ({})",
                record.policy,
                record.task,
                record.summary.mean_pct,
                record.smooth_mean,
                paths.root.display()
            );
        }
        Command::Report { runs, out } => {
            let report = cmd_report(&runs, &out)?;
            println!(
                "compared {} policies on {} tasks -> {}",
                report.policies.len(),
                report.tasks.len(),
                out.join("report.csv").display()
            );
            for row in &report.rows {
                println!(
                    "  {} / {}: success {:.1}% (delta {:+.1} pts), smoothness {:.4} ({:+.1}% vs baseline)",
                    row.task,
                    row.policy,
                    row.success_mean_pct,
                    row.delta_success_pts,
                    row.smooth_mean,
                    -row.smooth_reduction_pct
                );
            }
        }
        Command::Metrics { input, dt, cutoff_hz, jerk_ref } => {
            let text = std::fs::read_to_string(&input)?;
            let mut rows = Vec::new();
            for (i, line) in text.lines().enumerate().skip(1) {
                let cols: std::result::Result<Vec<f64>, _> =
                    line.split(',').skip(1).map(str::parse::<f64>).collect();
                let cols = cols.map_err(|e| {
                    Error::InvalidArgument(format!("{}:{}: {e}", input.display(), i + 1))
                })?;
                rows.push(cols);
            }
            let report = s_smooth(&rows, dt, cutoff_hz, jerk_ref)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
