use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use momp_core::harness::{bench, run_experiment, trace_user, write_outputs, ExperimentConfig};
use momp_core::Error;

#[derive(Parser)]
#[command(name = "momp", about = "Sparse mmWave channel estimation and single-AP localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full experiment and write metrics.csv and summary.json.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `rng_seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Time the solvers over the configured resolution sweep.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump intermediate artifacts for a single user.
    Trace {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        user: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(path: &Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.rng_seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let rows = run_experiment(&cfg)?;
            let summary = write_outputs(&rows, &cfg, &dir)?;
            for g in &summary.groups {
                println!(
                    "{} k={} rx={}: median loc {:?} m, median AoA {:?} deg, failures {}/{}",
                    g.method.tag(),
                    g.k_res,
                    g.rx_array,
                    g.median_loc_err_m,
                    g.median_aoa_err_deg,
                    g.failures,
                    g.rows
                );
            }
            if summary.failure_rate > cfg.failure_threshold {
                eprintln!(
                    "failure rate {:.3} exceeds threshold {:.3}",
                    summary.failure_rate, cfg.failure_threshold
                );
                return Ok(ExitCode::from(3));
            }
        }
        Command::Bench { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let rows = bench(&cfg)?;
            let json = serde_json::to_string_pretty(&rows)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    std::fs::write(dir.join("bench.json"), &json)?;
                }
                None => println!("{json}"),
            }
        }
        Command::Trace { config, user, out, seed } => {
            let cfg = load(&config, seed)?;
            for p in trace_user(&cfg, user, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
