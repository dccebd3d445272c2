use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ilc::ExperimentRecord;

/// Per-controller aggregates across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub controller: String,
    pub seeds: usize,
    /// Mean and sample standard deviation of the RMS error, indexed by
    /// iteration - 1, over the seeds that reached that iteration.
    pub mean_rms: Vec<f64>,
    pub std_rms: Vec<f64>,
    /// Smallest `k` with `mean_rms[1 + k] <= 0.5 * mean_rms[1]` (1-based
    /// iterations); `None` if never reached.
    pub iterations_to_half: Option<usize>,
    pub iterations_to_tenth: Option<usize>,
    /// Mean RMS over the last ten iterations (fewer if the run is shorter).
    pub final10_mean_rms: f64,
    /// Controller compute per seed, mean over seeds.
    pub mean_cumulative_s: f64,
    /// Controller compute summed over all seeds.
    pub total_compute_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub controllers: Vec<ControllerSummary>,
}

impl Summary {
    pub fn controller(&self, id: &str) -> Option<&ControllerSummary> {
        self.controllers.iter().find(|c| c.controller == id)
    }
}

/// Iterations after the first until `rms` falls to `frac` of its first
/// value.
pub fn iterations_to_fraction(rms: &[f64], frac: f64) -> Option<usize> {
    let first = *rms.first()?;
    rms.iter().position(|&r| r <= frac * first)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Aggregates records per controller, in order of first appearance.
pub fn summarize(records: &[ExperimentRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no records to summarize".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.controller.as_str()) {
            order.push(&r.controller);
        }
    }
    let mut controllers = Vec::with_capacity(order.len());
    for id in order {
        let rows: Vec<&ExperimentRecord> = records.iter().filter(|r| r.controller == id).collect();
        let n_it = rows.iter().map(|r| r.iteration).max().unwrap_or(0);
        let mut by_iter: Vec<Vec<f64>> = vec![Vec::new(); n_it];
        let mut seeds: Vec<u64> = Vec::new();
        let mut final_cum: Vec<(u64, usize, f64)> = Vec::new();
        for r in &rows {
            if r.iteration == 0 {
                return Err(Error::Parameter(format!("record for {id} has iteration 0")));
            }
            by_iter[r.iteration - 1].push(r.rms_error);
            match final_cum.iter_mut().find(|(s, _, _)| *s == r.seed) {
                Some(entry) if r.iteration > entry.1 => *entry = (r.seed, r.iteration, r.cumulative_s),
                Some(_) => {}
                None => {
                    seeds.push(r.seed);
                    final_cum.push((r.seed, r.iteration, r.cumulative_s));
                }
            }
        }
        // Iterations no seed reached (after an early abort) end the curve.
        let len = by_iter.iter().position(|v| v.is_empty()).unwrap_or(n_it);
        let mean_rms: Vec<f64> = by_iter[..len].iter().map(|v| mean(v)).collect();
        let std_rms: Vec<f64> = by_iter[..len].iter().map(|v| sample_std(v)).collect();
        let tail = &mean_rms[len.saturating_sub(10)..];
        let cum: Vec<f64> = final_cum.iter().map(|c| c.2).collect();
        controllers.push(ControllerSummary {
            controller: id.to_string(),
            seeds: seeds.len(),
            iterations_to_half: iterations_to_fraction(&mean_rms, 0.5),
            iterations_to_tenth: iterations_to_fraction(&mean_rms, 0.1),
            final10_mean_rms: if tail.is_empty() { f64::NAN } else { mean(tail) },
            mean_cumulative_s: mean(&cum),
            total_compute_s: cum.iter().sum(),
            mean_rms,
            std_rms,
        });
    }
    Ok(Summary { schema_version: super::SCHEMA_VERSION, controllers })
}
