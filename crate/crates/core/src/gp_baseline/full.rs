use nalgebra::{DMatrix, DVector};

use crate::error::{param_err, Error, Result};
use crate::linalg;

use super::{GpDataset, GpKernel, GpPoint};

/// Exact GP posterior over a dataset: the Cholesky factor of
/// `K(X, X) + noise I` and the weights `(K + noise I)^-1 y`.
#[derive(Clone, Debug)]
pub struct FullGp {
    kernel: GpKernel,
    noise: f64,
    inputs: Vec<GpPoint>,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
}

pub fn fit_full_gp(data: &GpDataset, kernel: GpKernel, noise: f64) -> Result<FullGp> {
    kernel.validate()?;
    if !(noise > 0.0 && noise.is_finite()) {
        return param_err(format!("noise variance must be positive, got {noise}"));
    }
    if data.is_empty() {
        return Err(Error::InsufficientData("full GP needs at least one training point".into()));
    }
    let x = data.inputs();
    let n = x.len();
    let mut gram = DMatrix::zeros(n, n);
    for c in 0..n {
        gram[(c, c)] = kernel.variance + noise;
        for r in (c + 1)..n {
            // Only the lower triangle is read by the factorization.
            gram[(r, c)] = kernel.eval(x[r], x[c]);
        }
    }
    let (chol, jitter) = linalg::cholesky_with_jitter(&gram, 1e-10, 1e-6)?;
    let alpha = linalg::cholesky_solve(&chol, &DVector::from_column_slice(data.targets()));
    Ok(FullGp { kernel, noise, inputs: x.to_vec(), chol, alpha, jitter })
}

impl FullGp {
    /// Posterior mean at each query point.
    pub fn predict(&self, queries: &[GpPoint]) -> DVector<f64> {
        DVector::from_iterator(
            queries.len(),
            queries.iter().map(|&q| self.inputs.iter().zip(self.alpha.iter()).map(|(&x, a)| self.kernel.eval(q, x) * a).sum()),
        )
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn kernel(&self) -> &GpKernel {
        &self.kernel
    }

    /// Diagonal jitter that the factorization needed (0 when none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower Cholesky factor of `K + noise I` (+ jitter).
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.chol
    }
}
