//! Command-line front end: thin argument handling over the pipeline stages.
//!
//! A JSON config file supplies defaults; command-line flags override it.
//! Exit codes: 0 success, 1 numeric failure, 2 I/O failure, 3 validation
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use fedeffect::data::{SplitName, Variant};
use fedeffect::fedrun::Transport;
use fedeffect::pipeline::{
    resolve_sources, run_dedup, run_evaluate, run_generate, run_predict, run_train, RunConfig,
};
use fedeffect::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fedeffect",
    version,
    about = "Federated treatment-effect estimation over siloed data sources"
)]
struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Artifact directory (created if missing).
    #[arg(long, global = true, default_value = "run", value_name = "DIR")]
    out: PathBuf,

    /// Replication seed; reseeds the data, train, predict, and dedup stages.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log debug detail to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset.
    Generate {
        /// Benchmark variant: data1 or data2.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Drop records duplicated across sources, matching on hashed keys.
    Dedup {
        /// Source CSV files; defaults to the manifest in the out directory.
        #[arg(long, num_args = 1.., value_name = "CSV")]
        sources: Vec<PathBuf>,
    },
    /// Fit the model by federated gradient ascent on the training split.
    Train {
        /// Source CSV files; defaults to the manifest in the out directory.
        #[arg(long, num_args = 1.., value_name = "CSV")]
        sources: Vec<PathBuf>,
        /// Ascent rounds.
        #[arg(long)]
        rounds: Option<usize>,
        /// Learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Monte Carlo samples per round.
        #[arg(long)]
        mc_samples: Option<usize>,
        /// Disable the cross-source offsets, for training and prediction.
        #[arg(long)]
        ablate_g: bool,
        /// Worker transport: inproc or tcp.
        #[arg(long)]
        transport: Option<String>,
    },
    /// Impute counterfactuals and write effect estimates.
    Predict {
        /// Source CSV files; defaults to the manifest in the out directory.
        #[arg(long, num_args = 1.., value_name = "CSV")]
        sources: Vec<PathBuf>,
        /// Posterior draws per unit.
        #[arg(long)]
        draws: Option<usize>,
        /// Split to score: train, test, or val.
        #[arg(long)]
        split: Option<String>,
    },
    /// Score predictions against ground truth on every configured split.
    Evaluate {
        /// Source CSV files; defaults to the manifest in the out directory.
        #[arg(long, num_args = 1.., value_name = "CSV")]
        sources: Vec<PathBuf>,
        /// Posterior draws per unit.
        #[arg(long)]
        draws: Option<usize>,
    },
}

/// Minimal stderr logger behind the `log` facade.
struct StderrLogger;

static LOGGER: StderrLogger = StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::max_level()
    }

    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            eprintln!("[{}] {}", record.level().as_str().to_lowercase(), record.args());
        }
    }

    fn flush(&self) {}
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let _ = log::set_logger(&LOGGER);
    log::set_max_level(if cli.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    });
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| Error::io(cli.out.display().to_string(), e))?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Generate { variant } => {
            if let Some(v) = variant {
                cfg.data.variant = Variant::from_str(v)?;
            }
            let manifest = run_generate(&cfg, out)?;
            println!(
                "wrote {} sources of {} rows to {}",
                manifest.m,
                manifest.n_s,
                out.display()
            );
        }
        Command::Dedup { sources } => {
            let paths = resolve_sources(out, sources)?;
            let outcome = run_dedup(&cfg, &paths, out)?;
            println!(
                "dropped {} duplicated rows across {} sources",
                outcome.rows_dropped,
                outcome.files.len()
            );
        }
        Command::Train {
            sources,
            rounds,
            lr,
            mc_samples,
            ablate_g,
            transport,
        } => {
            if let Some(r) = rounds {
                cfg.train.rounds = *r;
            }
            if let Some(lr) = lr {
                cfg.train.learning_rate = *lr;
            }
            if let Some(s) = mc_samples {
                cfg.train.mc_samples = *s;
            }
            if *ablate_g {
                cfg.train.ablate_g = true;
                cfg.predict.ablate_g = true;
            }
            if let Some(t) = transport {
                cfg.train.transport = Transport::from_str(t)?;
            }
            let paths = resolve_sources(out, sources)?;
            let (model, trace) = run_train(&cfg, &paths, out)?;
            let last = trace.rows.last().map(|r| r.elbo).unwrap_or(f64::NAN);
            println!(
                "trained {} rounds over {} sources, final elbo {last:.4}",
                model.rounds_run,
                model.summaries.len()
            );
        }
        Command::Predict {
            sources,
            draws,
            split,
        } => {
            if let Some(d) = draws {
                cfg.predict.draws = *d;
            }
            if let Some(s) = split {
                cfg.predict.split = SplitName::from_str(s)?;
            }
            let paths = resolve_sources(out, sources)?;
            let est = run_predict(&cfg, &paths, out)?;
            println!(
                "ate {:.4} (95% interval {:.4} to {:.4}, {} draws)",
                est.ate_mean,
                est.interval.0,
                est.interval.1,
                est.per_draw_ate.len()
            );
        }
        Command::Evaluate { sources, draws } => {
            if let Some(d) = draws {
                cfg.predict.draws = *d;
            }
            let paths = resolve_sources(out, sources)?;
            let report = run_evaluate(&cfg, &paths, out, 0.0)?;
            println!(
                "test sqrt-pehe {:.4}, ate error {:.4} ({} sources)",
                report.sqrt_pehe, report.ate_error, report.m_used
            );
        }
    }
    Ok(())
}
