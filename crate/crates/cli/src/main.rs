use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hibrto::parallel::Workers;
use hibrto_cli::commands::{self, DiagnoseOptions, Slice};
use hibrto_cli::{CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "hibrto", version, about = "RTO samplers for hierarchical Bayesian inverse problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file, or `preset:NAME` for a shipped preset.
    #[arg(long)]
    config: String,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured sampler and write chains, diagnostics and a manifest.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "HIBRTO_WORKERS", default_value_t = 1)]
        workers: usize,
    },
    /// Summarize a chains CSV.
    Diagnose {
        chains: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        burn_in: usize,
        /// Longest lag kept in the ACF table (default: the IACT window).
        #[arg(long)]
        max_lag: Option<usize>,
        /// u-matrix file for a credible band.
        #[arg(long)]
        u_draws: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        u_skip: usize,
        #[arg(long, value_enum)]
        slice: Option<Slice>,
    },
    /// Generate synthetic data (data.csv and data.json).
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Draw fields from the prior.
    PriorSample {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
    },
}

fn load(common: &Common) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run { common, workers } => {
            let (cfg, out) = load(&common)?;
            let result = commands::run(&cfg, &Workers::new(workers)?, &out)?;
            for c in &result.report.columns {
                match (&c.stats, &c.error) {
                    (Some(s), _) => println!("{:>8}  mean {:>12.5e}  iact {:>8.2}", c.name, s.mean, s.iact),
                    (None, Some(e)) => println!("{:>8}  {e}", c.name),
                    _ => {}
                }
            }
            for (block, rate) in &result.report.acceptance {
                println!("acceptance {block}: {rate:.3}");
            }
            println!("wrote {}", out.display());
        }
        Command::Diagnose {
            chains,
            out,
            burn_in,
            max_lag,
            u_draws,
            u_skip,
            slice,
        } => {
            let opts = DiagnoseOptions {
                burn_in,
                max_lag,
                u_draws,
                u_skip,
                slice,
            };
            let report = commands::diagnose(&chains, &opts, &out)?;
            for c in &report.columns {
                if let Some(e) = &c.error {
                    eprintln!("{}: {e}", c.name);
                }
            }
            println!("wrote {}", out.display());
        }
        Command::GenData { common } => {
            let (cfg, out) = load(&common)?;
            let y = commands::gen_data(&cfg, common.seed, &out)?;
            println!("wrote {} observations to {}", y.len(), out.display());
        }
        Command::PriorSample {
            common,
            count,
            delta,
            gamma,
        } => {
            let (cfg, out) = load(&common)?;
            commands::prior_sample(&cfg, count, delta, gamma, cfg.seed, &out)?;
            println!("wrote {count} prior draws to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
