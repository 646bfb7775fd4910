use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use beamtune::harness::{
    gen_dataset, metrics_from_trace, oracle_trace, run_eval, run_offline_training, ExperimentConfig, HarnessError,
    TrainOptions, ORACLE_FILE,
};
use beamtune::metrics::write_metrics;
use clap::{Args, Parser, Subcommand};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

/// Broadcast-beam self-tuning with deep Q-learning.
#[derive(Parser)]
#[command(name = "beamtune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the snapshots a synthetic config produces as a ray-trace file.
    GenDataset {
        #[command(flatten)]
        common: Common,
        /// Number of schedule steps to emit (default: the training budget).
        #[arg(long)]
        horizon: Option<u64>,
    },
    /// Offline training; exits 3 if the final window has not converged.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Suppress per-window progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Greedy rollout of a trained checkpoint against the oracle.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Rollout length (default: training.eval_steps).
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Dump the oracle optimum for every step of the schedule.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        horizon: Option<u64>,
    },
    /// Recompute windowed ASD/AM from a per-step trace.
    Metrics {
        #[command(flatten)]
        common: OptionalCommon,
        #[arg(long)]
        trace: PathBuf,
        /// Window length (default: training.metrics_window from --config, else 200).
        #[arg(long)]
        window: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct OptionalCommon {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: output_dir from the config, else runs/<config name>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<u64>,
}

struct Loaded {
    config: ExperimentConfig,
    text: String,
    out: PathBuf,
}

fn load(path: &Path, o: &Overrides) -> Result<Loaded> {
    let mut config = ExperimentConfig::load(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    if let Some(seed) = o.seed {
        config.seed = seed;
    }
    if let Some(episodes) = o.episodes {
        config.training.episodes = episodes;
    }
    config.validate()?;
    let out = match (&o.out, &config.output_dir) {
        (Some(dir), _) => dir.clone(),
        (None, Some(dir)) => dir.clone(),
        (None, None) => Path::new("runs").join(path.file_stem().unwrap_or_default()),
    };
    Ok(Loaded { config, text, out })
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenDataset { common, horizon } => {
            let l = load(&common.config, &common.overrides)?;
            let horizon = horizon.unwrap_or_else(|| l.config.training.total_steps());
            let path = l.out.join("dataset.csv");
            let snaps = gen_dataset(&l.config, &path, horizon)?;
            println!("wrote {} snapshots to {}", snaps.len(), path.display());
        }
        Command::Train { common, resume, quiet } => {
            let l = load(&common.config, &common.overrides)?;
            let window = l.config.training.metrics_window as u64;
            let total = l.config.training.total_steps();
            let mut acc = (0u64, 0usize, 0usize);
            let mut progress = |r: &beamtune::metrics::StepRecord| {
                acc.1 += r.reward;
                acc.2 += usize::from(r.actions != r.oracle_actions);
                acc.0 += 1;
                if (r.step + 1) % window == 0 || r.step + 1 == total {
                    eprintln!(
                        "step {:>7}/{total}  eps {:.2e}  mean reward {:.1}  mismatches {}/{}",
                        r.step + 1,
                        r.epsilon,
                        acc.1 as f64 / acc.0 as f64,
                        acc.2,
                        acc.0
                    );
                    acc = (0, 0, 0);
                }
            };
            let opts = TrainOptions {
                user_config_text: Some(&l.text),
                resume: resume.as_deref(),
                progress: if quiet { None } else { Some(&mut progress) },
            };
            let art = run_offline_training(&l.config, &l.out, opts)?;
            let s = &art.summary;
            println!("{}", serde_json::to_string_pretty(s)?);
            if !s.converged {
                eprintln!("budget of {} steps exhausted without convergence", s.steps);
                return Ok(EXIT_NOT_CONVERGED);
            }
        }
        Command::Eval { common, checkpoint, steps } => {
            let l = load(&common.config, &common.overrides)?;
            let steps = steps.unwrap_or(l.config.training.eval_steps);
            let (report, _) = run_eval(&l.config, &checkpoint, steps, Some(&l.out))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Oracle { common, horizon } => {
            let l = load(&common.config, &common.overrides)?;
            let horizon = horizon.unwrap_or_else(|| l.config.training.total_steps());
            mkdir(&l.out)?;
            let path = l.out.join(ORACLE_FILE);
            let sink = BufWriter::new(File::create(&path).map_err(|e| HarnessError::io(&path, e))?);
            oracle_trace(&l.config, horizon, sink)?;
            println!("wrote {horizon} oracle rows to {}", path.display());
        }
        Command::Metrics { common, trace, window } => {
            let cfg_window = match &common.config {
                Some(p) => Some(load(p, &common.overrides)?.config.training.metrics_window),
                None => None,
            };
            let window = window.or(cfg_window).unwrap_or(200);
            let (rows, n_sectors) = metrics_from_trace(&trace, window)?;
            match &common.overrides.out {
                Some(dir) => {
                    mkdir(dir)?;
                    let path = dir.join("metrics.csv");
                    let f = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
                    write_metrics(BufWriter::new(f), &rows, n_sectors)?;
                    println!("wrote {} windows to {}", rows.len(), path.display());
                }
                None => write_metrics(std::io::stdout().lock(), &rows, n_sectors).context("writing metrics")?,
            }
        }
    }
    Ok(0)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<HarnessError>() {
        Some(e) if e.is_config() => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
