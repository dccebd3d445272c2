use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

use super::{GpDataset, GpKernel};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrefitOptions {
    pub max_evals: usize,
    /// Initial step in log space.
    pub step: f64,
    pub min_step: f64,
}

impl Default for PrefitOptions {
    fn default() -> Self {
        Self { max_evals: 400, step: 0.5, min_step: 1e-3 }
    }
}

fn log_marginal(data: &GpDataset, kernel: &GpKernel, noise: f64) -> Option<f64> {
    let x = data.inputs();
    let n = x.len();
    let mut k = DMatrix::from_fn(n, n, |a, b| kernel.eval(x[a], x[b]));
    for i in 0..n {
        k[(i, i)] += noise;
    }
    let l = linalg::cholesky_lower(k).ok()?;
    let y = DVector::from_column_slice(data.targets());
    let mut z = y.clone();
    linalg::forward_substitute(&l, &mut z);
    let logdet: f64 = 2.0 * (0..n).map(|d| l[(d, d)].ln()).sum::<f64>();
    Some(-0.5 * (z.norm_squared() + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// One-shot maximization of the exact log marginal likelihood over the
/// kernel hyperparameters and noise variance (compass search in log space).
/// Returns the improved `(kernel, noise)`.
pub fn prefit_kernel(data: &GpDataset, init: GpKernel, noise: f64, options: &PrefitOptions) -> Result<(GpKernel, f64)> {
    init.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("prefit needs training data".into()));
    }
    let unpack = |v: &[f64; 4]| {
        (
            GpKernel { variance: v[0].exp(), iteration_lengthscale: v[1].exp(), time_lengthscale: v[2].exp() },
            v[3].exp(),
        )
    };
    let objective = |v: &[f64; 4]| {
        let (k, s) = unpack(v);
        log_marginal(data, &k, s).unwrap_or(f64::NEG_INFINITY)
    };
    let mut x = [init.variance.ln(), init.iteration_lengthscale.ln(), init.time_lengthscale.ln(), noise.ln()];
    let mut best = objective(&x);
    if !best.is_finite() {
        return Err(Error::Numerical("initial hyperparameters give a singular covariance".into()));
    }
    let mut step = options.step;
    let mut evals = 1;
    while step >= options.min_step && evals < options.max_evals {
        let mut improved = false;
        for c in 0..4 {
            for dir in [1.0, -1.0] {
                let mut trial = x;
                trial[c] += dir * step;
                let f = objective(&trial);
                evals += 1;
                if f > best {
                    best = f;
                    x = trial;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok(unpack(&x))
}
