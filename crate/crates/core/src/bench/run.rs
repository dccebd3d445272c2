use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ilc::{run_ilc_loop, ExperimentRecord, LoopSettings, Plant};

use super::summary::{summarize, Summary};
use super::{ExperimentConfig, SCHEMA_VERSION};

pub const RECORDS_FILE: &str = "records.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REFERENCE_FILE: &str = "reference.csv";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";

pub const RECORDS_HEADER: [&str; 9] =
    ["controller", "seed", "iteration", "rms_error", "max_error", "predict_s", "estimate_s", "rollout_s", "cumulative_s"];

/// A `(controller, seed)` run that stopped early.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AbortedCell {
    pub controller: String,
    pub seed: u64,
    /// Iterations completed before the stop.
    pub completed: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    /// In configuration order: controller-major, then seed, then iteration.
    pub records: Vec<ExperimentRecord>,
    pub summary: Summary,
    pub aborted: Vec<AbortedCell>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    generator: String,
    config: &'a ExperimentConfig,
    files: [&'static str; 4],
    /// Columns that depend on the machine and are not reproducible.
    timing_columns: [&'static str; 4],
}

#[derive(Serialize)]
struct TrajectoryRow<'a> {
    controller: &'a str,
    seed: u64,
    iteration: usize,
    t: usize,
    x: f64,
    y: f64,
}

struct Cell {
    controller: String,
    seed: u64,
    records: Vec<ExperimentRecord>,
    paths: Vec<(usize, Vec<[f64; 2]>)>,
    aborted: Option<String>,
}

fn run_cell(config: &ExperimentConfig, plant: &dyn Plant, index: usize, keep: &[usize]) -> Cell {
    let n_seeds = config.seeds.len();
    let controller = &config.controllers[index / n_seeds];
    let seed = config.seeds[index % n_seeds];
    let settings = LoopSettings { qpgp: config.qpgp.clone(), gp: config.gp.clone(), fixed_model: None };
    let id = controller.id();
    match run_ilc_loop(plant, controller, &settings, config.iterations, seed) {
        Ok(out) => {
            let paths = keep
                .iter()
                .filter_map(|&it| out.rollouts.get(it - 1).map(|r| (it, r.path.clone())))
                .collect();
            Cell { controller: id, seed, records: out.records, paths, aborted: out.aborted }
        }
        Err(e) => Cell { controller: id, seed, records: Vec::new(), paths: Vec::new(), aborted: Some(e.to_string()) },
    }
}

/// Runs every `(controller, seed)` cell on `workers` threads and writes the
/// result files into `out_dir`. Rows are written in configuration order as
/// soon as every earlier cell has finished, so the files do not depend on
/// scheduling. Cells that abort keep the rows they produced and are listed
/// in the report.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path, workers: usize) -> Result<RunReport> {
    config.validate()?;
    let (plant, reference) = config.build_plant()?;
    std::fs::create_dir_all(out_dir)?;

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        generator: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        config,
        files: [RECORDS_FILE, SUMMARY_FILE, REFERENCE_FILE, TRAJECTORIES_FILE],
        timing_columns: ["predict_s", "estimate_s", "rollout_s", "cumulative_s"],
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(out_dir.join(MANIFEST_FILE))?), &manifest)?;
    reference.write_csv(BufWriter::new(File::create(out_dir.join(REFERENCE_FILE))?))?;

    // Headers are written up front so a run that aborts early still has them.
    let headerless = |name: &str| csv::WriterBuilder::new().has_headers(false).from_path(out_dir.join(name));
    let mut records_out = headerless(RECORDS_FILE)?;
    let mut paths_out = headerless(TRAJECTORIES_FILE)?;
    records_out.write_record(RECORDS_HEADER)?;
    paths_out.write_record(["controller", "seed", "iteration", "t", "x", "y"])?;

    let keep = config.trajectory_iterations();
    let n_cells = config.controllers.len() * config.seeds.len();
    let workers = workers.clamp(1, n_cells);
    let next = AtomicUsize::new(0);
    let mut records = Vec::new();
    let mut aborted = Vec::new();
    let mut sink_result: Result<()> = Ok(());

    thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, Cell)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, plant, keep) = (&next, plant.as_ref(), &keep);
            scope.spawn(move || loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= n_cells {
                    break;
                }
                if tx.send((k, run_cell(config, plant, k, keep))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending = BTreeMap::new();
        let mut want = 0;
        for (k, cell) in rx {
            pending.insert(k, cell);
            while let Some(cell) = pending.remove(&want) {
                want += 1;
                if sink_result.is_err() {
                    continue;
                }
                sink_result = write_cell(&mut records_out, &mut paths_out, &cell);
                log::info!(
                    "{} seed {}: {} iterations, final rms {:.4e}",
                    cell.controller,
                    cell.seed,
                    cell.records.len(),
                    cell.records.last().map_or(f64::NAN, |r| r.rms_error)
                );
                if let Some(message) = &cell.aborted {
                    log::warn!("{} seed {} aborted: {message}", cell.controller, cell.seed);
                    aborted.push(AbortedCell {
                        controller: cell.controller.clone(),
                        seed: cell.seed,
                        completed: cell.records.len(),
                        message: message.clone(),
                    });
                }
                records.extend(cell.records);
            }
        }
    });
    sink_result?;

    if records.is_empty() {
        return Err(Error::Aborted(format!("every run aborted; first: {}", aborted[0].message)));
    }
    let summary = summarize(&records)?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(out_dir.join(SUMMARY_FILE))?), &summary)?;
    Ok(RunReport { out_dir: out_dir.to_path_buf(), records, summary, aborted })
}

fn write_cell<W: Write>(records: &mut csv::Writer<W>, paths: &mut csv::Writer<W>, cell: &Cell) -> Result<()> {
    for r in &cell.records {
        records.serialize(r)?;
    }
    for (iteration, path) in &cell.paths {
        for (t, pt) in path.iter().enumerate() {
            paths.serialize(TrajectoryRow {
                controller: &cell.controller,
                seed: cell.seed,
                iteration: *iteration,
                t,
                x: pt[0],
                y: pt[1],
            })?;
        }
    }
    records.flush()?;
    paths.flush()?;
    Ok(())
}

/// Reads a `records.csv` written by [`run_experiment`].
pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.iter().ne(RECORDS_HEADER) {
        return Err(Error::Config(format!("{} has an unexpected header: {}", path.display(), header.iter().collect::<Vec<_>>().join(","))));
    }
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}
