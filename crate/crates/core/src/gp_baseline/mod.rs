//! Gaussian-process baselines over the whole error history.
//!
//! Each output dimension is regressed separately on `(iteration, timestep)`
//! inputs with a product RBF kernel; the next iteration is predicted by
//! querying iteration `i + 1` at every timestep.

mod full;
mod prefit;
mod sparse;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::trajectory::ErrorTrajectory;

pub use full::{fit_full_gp, FullGp};
pub use prefit::{prefit_kernel, PrefitOptions};
pub use sparse::{fit_sparse_gp, kmeans, SparseGp, SparseOptions};

/// One regression input: `(iteration index, timestep)`, both 1-based.
pub type GpPoint = [f64; 2];

/// `variance * exp(-di^2 / (2 li^2) - dt^2 / (2 lt^2))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpKernel {
    pub variance: f64,
    pub iteration_lengthscale: f64,
    pub time_lengthscale: f64,
}

impl GpKernel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("variance", self.variance),
            ("iteration_lengthscale", self.iteration_lengthscale),
            ("time_lengthscale", self.time_lengthscale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return param_err(format!("GP kernel {name} must be positive and finite, got {v}"));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, a: GpPoint, b: GpPoint) -> f64 {
        let di = (a[0] - b[0]) / self.iteration_lengthscale;
        let dt = (a[1] - b[1]) / self.time_lengthscale;
        self.variance * (-0.5 * (di * di + dt * dt)).exp()
    }

    /// Input scaled by the lengthscales, so Euclidean distance matches the
    /// kernel's notion of closeness.
    pub(crate) fn normalize(&self, x: GpPoint) -> GpPoint {
        [x[0] / self.iteration_lengthscale, x[1] / self.time_lengthscale]
    }

    pub(crate) fn denormalize(&self, x: GpPoint) -> GpPoint {
        [x[0] * self.iteration_lengthscale, x[1] * self.time_lengthscale]
    }
}

/// Training data for one output dimension.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GpDataset {
    inputs: Vec<GpPoint>,
    targets: Vec<f64>,
}

impl GpDataset {
    pub fn new(inputs: Vec<GpPoint>, targets: Vec<f64>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return shape_err(format!("{} inputs but {} targets", inputs.len(), targets.len()));
        }
        if inputs.iter().any(|x| !(x[0].is_finite() && x[1] >= 1.0)) || targets.iter().any(|y| !y.is_finite()) {
            return param_err("GP data must be finite with timesteps >= 1");
        }
        Ok(Self { inputs, targets })
    }

    /// Dimension `j` of every block; block `k` (0-based) becomes iteration
    /// `k + 1`. Only timesteps `1, 1 + stride, 1 + 2 stride, ...` are kept.
    pub fn from_blocks(blocks: &[ErrorTrajectory], j: usize, stride: usize) -> Result<Self> {
        let mut data = Self::default();
        for (k, b) in blocks.iter().enumerate() {
            data.push_block(k + 1, b, j, stride)?;
        }
        Ok(data)
    }

    /// Appends one iteration's samples of dimension `j`.
    pub fn push_block(&mut self, iteration: usize, block: &ErrorTrajectory, j: usize, stride: usize) -> Result<()> {
        if stride == 0 {
            return param_err("time stride must be at least 1");
        }
        if j >= block.n() {
            return shape_err(format!("dimension {j} out of range for n = {}", block.n()));
        }
        for t in (0..block.p()).step_by(stride) {
            self.inputs.push([iteration as f64, (t + 1) as f64]);
            self.targets.push(block.get(j, t));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[GpPoint] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
}

/// Query points for every timestep `1..=p` of `iteration`.
pub fn block_queries(iteration: usize, p: usize) -> Vec<GpPoint> {
    (1..=p).map(|t| [iteration as f64, t as f64]).collect()
}
