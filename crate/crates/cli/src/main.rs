use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use qpgp_ilc::bench::{self, ExperimentConfig, Summary, PLANT_KINDS};
use qpgp_ilc::Error;

/// Runs and summarizes learning-control benchmark experiments.
#[derive(Parser, Debug)]
#[command(name = "qpgp-ilc", version)]
struct Cli {
    /// Replace the configured seeds, e.g. `--seed-override 7,8`.
    #[arg(long, global = true, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
    /// Output directory. Defaults to the config's `output_dir`, then to
    /// `$QPGP_ILC_OUT/<name>`, then to `runs/<name>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only report warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every controller on every seed and write the run directory.
    Run {
        config: PathBuf,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Recompute summary.json from a run directory's records.csv.
    Summarize { dir: PathBuf },
    /// Check a config file without running it.
    Validate { config: PathBuf },
    /// List the available plants.
    ListPlants,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Config and input problems exit with 2, anything that goes wrong while
/// running with 3.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Json(_) | Error::Parameter(_) | Error::Csv(_)) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn load_config(path: &Path, seeds: &Option<Vec<u64>>) -> anyhow::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seeds) = seeds {
        config.seeds = seeds.clone();
        config.validate()?;
    }
    Ok(config)
}

fn output_dir(cli_out: &Option<PathBuf>, config: &ExperimentConfig, config_path: &Path) -> PathBuf {
    if let Some(out) = cli_out {
        return out.clone();
    }
    if let Some(out) = &config.output_dir {
        return out.clone();
    }
    let name = config.name.clone().unwrap_or_else(|| {
        config_path.file_stem().map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned())
    });
    let root = std::env::var_os("QPGP_ILC_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(name)
}

fn print_summary(summary: &Summary) {
    println!("{:<16} {:>12} {:>8} {:>8} {:>12}", "controller", "final10_rms", "to_0.5", "to_0.1", "compute_s");
    let fmt = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |k| k.to_string());
    for c in &summary.controllers {
        println!(
            "{:<16} {:>12.4e} {:>8} {:>8} {:>12.3}",
            c.controller,
            c.final10_mean_rms,
            fmt(c.iterations_to_half),
            fmt(c.iterations_to_tenth),
            c.mean_cumulative_s
        );
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match &cli.command {
        Command::Run { config: path, workers } => {
            let config = load_config(path, &cli.seed_override)?;
            let out = output_dir(&cli.out, &config, path);
            let workers = workers
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
                .max(1);
            log::info!("writing {} to {}", path.display(), out.display());
            let report = bench::run_experiment(&config, &out, workers)?;
            if !cli.quiet {
                print_summary(&report.summary);
                println!("results in {}", report.out_dir.display());
            }
            if report.aborted.is_empty() {
                Ok(0)
            } else {
                for a in &report.aborted {
                    eprintln!("aborted: {} seed {} after {} iterations: {}", a.controller, a.seed, a.completed, a.message);
                }
                Ok(EXIT_RUNTIME)
            }
        }
        Command::Summarize { dir } => {
            let records = bench::read_records(&dir.join(bench::RECORDS_FILE))
                .with_context(|| format!("reading records from {}", dir.display()))?;
            let summary = bench::summarize(&records)?;
            let file = std::fs::File::create(dir.join(bench::SUMMARY_FILE))?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(file), &summary)?;
            if !cli.quiet {
                print_summary(&summary);
            }
            Ok(0)
        }
        Command::Validate { config: path } => {
            let config = load_config(path, &cli.seed_override)?;
            if !cli.quiet {
                println!(
                    "{}: {} plant, {} controllers, {} seeds, {} iterations of {} samples",
                    path.display(),
                    config.plant.name(),
                    config.controllers.len(),
                    config.seeds.len(),
                    config.iterations,
                    config.p
                );
            }
            Ok(0)
        }
        Command::ListPlants => {
            for kind in PLANT_KINDS {
                println!("{kind}");
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
