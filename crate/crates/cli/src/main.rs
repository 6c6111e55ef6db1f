use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nfmusic_core::harness::{dump_spectrum, run_experiment, scenario_fig1, write_fig1, write_report};
use nfmusic_core::signal::SnrReference;
use nfmusic_core::{ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "nfmusic", version, about = "Near-field channel estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo sweep over SNR points; writes trials.csv, aggregate.csv
    /// and failures.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        snr_ref: Option<SnrReference>,
    },
    /// Zero-elevation 3D MUSIC spectra at the high and low pilot counts.
    Fig1 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Angular and range spectra of one trial.
    DumpSpectrum {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Index into `snr_db_list`.
        #[arg(long, default_value_t = 0)]
        snr_index: usize,
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
}

fn load(path: &Path, out_dir: Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(dir) = out_dir {
        cfg.out_dir = dir;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            out_dir,
            threads,
            seed,
            snr_ref,
        } => {
            let mut cfg = load(&config, out_dir, seed)?;
            if let Some(r) = snr_ref {
                cfg.snr_ref = r;
            }
            let report = run_experiment(&cfg, threads)?;
            for a in &report.aggregates {
                println!(
                    "{:<20} {:>6} dB  median NMSE {:.3e}  mean gain {:.4}  ok {} failed {}",
                    a.method.name(),
                    a.snr_db,
                    a.median_nmse,
                    a.mean_bf_gain,
                    a.trials_ok,
                    a.trials_failed
                );
            }
            for p in write_report(&report, &cfg.out_dir)? {
                log::info!("wrote {}", p.display());
            }
        }
        Command::Fig1 { config, out_dir, seed } => {
            let cfg = load(&config, out_dir, seed)?;
            let out = scenario_fig1(&cfg)?;
            for r in [&out.high, &out.low] {
                println!(
                    "L = {:>2}: {} distinct peaks, {} of {} UEs resolved",
                    r.l_pilots,
                    r.distinct.len(),
                    r.resolved,
                    out.truth.len()
                );
            }
            for p in write_fig1(&out, &cfg.out_dir)? {
                log::info!("wrote {}", p.display());
            }
        }
        Command::DumpSpectrum {
            config,
            out_dir,
            snr_index,
            trial,
        } => {
            let cfg = load(&config, out_dir, None)?;
            for p in dump_spectrum(&cfg, snr_index, trial, &cfg.out_dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
