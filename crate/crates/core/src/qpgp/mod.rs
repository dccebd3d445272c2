//! Quasi-periodic GP error model.
//!
//! Each output dimension `j` follows the block autoregression
//! `x_{i+1} = omega_j x_i + eps_{i+1}`, `eps ~ N(0, K_j)`, where `x_i` is
//! the `p`-sample error of iteration `i`. Prediction only ever needs the
//! most recent block; estimation keeps `p x p` lag statistics so its cost
//! does not grow with the number of iterations.

mod estimate;
mod oracle;
mod predict;
mod sample;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::kernels::CovKernel;
use crate::trajectory::ErrorTrajectory;

pub use estimate::{
    estimate_stage1, estimate_stage1_with, estimate_stage2, reduced_nll, update_estimates, CovStructure,
    EstimatorOptions, KernelMode, LagStats, QpgpEstimator, Stage1Estimate, Stage1Options,
};
pub use oracle::{brute_force_conditional_mean, conditional_mean, ORACLE_MAX_SIZE};
pub use predict::{block_predict, element_predict, predictor_matrix, OnlineElementPredictor, PredictorMatrix};
pub use sample::sample_trajectory;

/// Per-dimension QPGP parameters `(omega_j, K_j)` sharing one block length.
#[derive(Clone, Debug, PartialEq)]
pub struct QpgpModel {
    p: usize,
    omega: Vec<f64>,
    kernels: Vec<CovKernel>,
}

impl QpgpModel {
    pub fn new(omega: Vec<f64>, kernels: Vec<CovKernel>) -> Result<Self> {
        if omega.is_empty() || omega.len() != kernels.len() {
            return shape_err(format!(
                "need one kernel per output dimension ({} omegas, {} kernels)",
                omega.len(),
                kernels.len()
            ));
        }
        let p = kernels[0].size();
        if kernels.iter().any(|k| k.size() != p) {
            return shape_err("all kernels must share the block length p");
        }
        for (j, w) in omega.iter().enumerate() {
            if !(w.abs() < 1.0) {
                return param_err(format!("omega[{j}] = {w} must lie strictly inside (-1, 1)"));
            }
        }
        Ok(Self { p, omega, kernels })
    }

    /// Same `omega` and kernel for every dimension.
    pub fn uniform(n: usize, omega: f64, kernel: CovKernel) -> Result<Self> {
        Self::new(vec![omega; n], vec![kernel; n])
    }

    pub fn n(&self) -> usize {
        self.omega.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn kernels(&self) -> &[CovKernel] {
        &self.kernels
    }

    pub fn kernel(&self, j: usize) -> &CovKernel {
        &self.kernels[j]
    }

    pub(crate) fn check_trajectory(&self, e: &ErrorTrajectory) -> Result<()> {
        if e.n() != self.n() || e.p() != self.p {
            return shape_err(format!(
                "trajectory is {}x{} but the model expects {}x{}",
                e.n(),
                e.p(),
                self.n(),
                self.p
            ));
        }
        Ok(())
    }

    pub(crate) fn check_dim(&self, j: usize) -> Result<()> {
        if j >= self.n() {
            return shape_err(format!("dimension {j} out of range for n = {}", self.n()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&QpgpModelDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: QpgpModelDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}

/// JSON checkpoint form: kernels as row-major arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QpgpModelDoc {
    pub n: usize,
    pub p: usize,
    pub omega: Vec<f64>,
    pub kernels: Vec<Vec<f64>>,
}

impl From<&QpgpModel> for QpgpModelDoc {
    fn from(m: &QpgpModel) -> Self {
        let kernels = m
            .kernels
            .iter()
            .map(|k| {
                let v = k.values();
                (0..m.p).flat_map(|r| (0..m.p).map(move |c| v[(r, c)])).collect()
            })
            .collect();
        Self { n: m.n(), p: m.p, omega: m.omega.clone(), kernels }
    }
}

impl TryFrom<QpgpModelDoc> for QpgpModel {
    type Error = Error;

    fn try_from(doc: QpgpModelDoc) -> Result<Self> {
        if doc.omega.len() != doc.n || doc.kernels.len() != doc.n {
            return shape_err("model document: omega and kernels must have n entries");
        }
        let kernels = doc
            .kernels
            .iter()
            .map(|rows| {
                if rows.len() != doc.p * doc.p {
                    return shape_err(format!("kernel must have p*p = {} entries", doc.p * doc.p));
                }
                CovKernel::new(DMatrix::from_row_slice(doc.p, doc.p, rows))
            })
            .collect::<Result<Vec<_>>>()?;
        QpgpModel::new(doc.omega, kernels)
    }
}

/// Error blocks `e_1, ..., e_i` observed so far, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorHistory {
    blocks: Vec<ErrorTrajectory>,
}

impl ErrorHistory {
    pub fn new(blocks: Vec<ErrorTrajectory>) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return Err(Error::InsufficientData("error history must contain at least one block".into()));
        };
        if blocks.iter().any(|b| !b.same_shape(first)) {
            return shape_err("all history blocks must share (n, p)");
        }
        Ok(Self { blocks })
    }

    pub fn single(block: ErrorTrajectory) -> Self {
        Self { blocks: vec![block] }
    }

    pub fn push(&mut self, block: ErrorTrajectory) -> Result<()> {
        if !block.same_shape(&self.blocks[0]) {
            return shape_err("new block does not match the history's (n, p)");
        }
        self.blocks.push(block);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.blocks[0].n()
    }

    pub fn p(&self) -> usize {
        self.blocks[0].p()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn blocks(&self) -> &[ErrorTrajectory] {
        &self.blocks
    }

    pub fn last(&self) -> &ErrorTrajectory {
        self.blocks.last().expect("history is non-empty")
    }

    /// The history restricted to its first `count` blocks.
    pub fn prefix(&self, count: usize) -> Result<Self> {
        Self::new(self.blocks[..count.min(self.len())].to_vec())
    }

    /// Dimension `j` of every block, oldest first.
    pub fn dimension(&self, j: usize) -> Vec<DVector<f64>> {
        self.blocks.iter().map(|b| b.block(j).into_owned()).collect()
    }
}
