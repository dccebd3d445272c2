use nalgebra::{DVector, DVectorView, DVectorViewMut};

use crate::error::{shape_err, Result};

/// One iteration's lifted error: `n` output dimensions, each a block of `p`
/// consecutive timesteps (`data[j * p + t]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorTrajectory {
    n: usize,
    p: usize,
    data: DVector<f64>,
}

impl ErrorTrajectory {
    pub fn new(n: usize, p: usize, data: DVector<f64>) -> Result<Self> {
        if n == 0 || p == 0 {
            return shape_err(format!("error trajectory needs n, p >= 1 (got n={n}, p={p})"));
        }
        if data.len() != n * p {
            return shape_err(format!("expected {} lifted entries, got {}", n * p, data.len()));
        }
        Ok(Self { n, p, data })
    }

    pub fn zeros(n: usize, p: usize) -> Self {
        Self { n, p, data: DVector::zeros(n * p) }
    }

    /// Builds from per-dimension blocks, which must share one length.
    pub fn from_blocks(blocks: &[Vec<f64>]) -> Result<Self> {
        let n = blocks.len();
        let p = blocks.first().map_or(0, Vec::len);
        if blocks.iter().any(|b| b.len() != p) {
            return shape_err("all blocks must have the same length");
        }
        Self::new(n, p, DVector::from_iterator(n * p, blocks.iter().flatten().copied()))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn block(&self, j: usize) -> DVectorView<'_, f64> {
        self.data.rows(j * self.p, self.p)
    }

    pub fn block_mut(&mut self, j: usize) -> DVectorViewMut<'_, f64> {
        self.data.rows_mut(j * self.p, self.p)
    }

    pub fn get(&self, j: usize, t: usize) -> f64 {
        self.data[j * self.p + t]
    }

    pub fn set(&mut self, j: usize, t: usize, v: f64) {
        self.data[j * self.p + t] = v;
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n == other.n && self.p == other.p
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }

    /// Root-mean-square over timesteps of the per-timestep Euclidean error.
    pub fn rms(&self) -> f64 {
        (self.data.norm_squared() / self.p as f64).sqrt()
    }

    /// Largest per-timestep Euclidean error.
    pub fn max_norm(&self) -> f64 {
        (0..self.p)
            .map(|t| (0..self.n).map(|j| self.get(j, t).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
