use nalgebra::{DMatrix, DVector};

use crate::error::{shape_err, Error, Result};
use crate::linalg;
use crate::trajectory::ErrorTrajectory;

use super::QpgpModel;

/// Next-iteration forecast from the previous block alone: `omega_j e_{i,j}`.
pub fn block_predict(model: &QpgpModel, e_i: &ErrorTrajectory) -> Result<ErrorTrajectory> {
    model.check_trajectory(e_i)?;
    let mut out = e_i.clone();
    for (j, &w) in model.omega().iter().enumerate() {
        out.block_mut(j).scale_mut(w);
    }
    Ok(out)
}

fn leading_factor(model: &QpgpModel, j: usize, size: usize) -> Result<DMatrix<f64>> {
    let k = model.kernel(j).values();
    let lead = k.view((0, 0), (size, size)).clone_owned();
    linalg::cholesky_lower(lead).map_err(|pivot| {
        Error::Numerical(format!(
            "leading {size}x{size} block of kernel {j} is singular at pivot {pivot}; raise the psd floor"
        ))
    })
}

/// Conditional mean of element `t` (1-based) of the next block in dimension
/// `j`, given the previous block and the first `t - 1` elements of the next
/// one.
///
/// The cross-covariance is row `t` of the kernel restricted to columns
/// `1..t-1`, which is what the Gaussian conditional mean requires for a
/// general kernel.
pub fn element_predict(
    model: &QpgpModel,
    e_i: &ErrorTrajectory,
    prefix: &[f64],
    j: usize,
    t: usize,
) -> Result<f64> {
    model.check_trajectory(e_i)?;
    model.check_dim(j)?;
    let p = model.p();
    if t < 1 || t > p {
        return shape_err(format!("timestep t = {t} outside 1..={p}"));
    }
    if prefix.len() != t - 1 {
        return shape_err(format!("prefix must hold t - 1 = {} values, got {}", t - 1, prefix.len()));
    }
    let w = model.omega()[j];
    let prev = e_i.block(j);
    let base = w * prev[t - 1];
    if t == 1 {
        return Ok(base);
    }
    let l = leading_factor(model, j, t - 1)?;
    let resid = DVector::from_iterator(t - 1, prefix.iter().zip(prev.iter()).map(|(x, e)| x - w * e));
    let alpha = linalg::cholesky_solve(&l, &resid);
    let k = model.kernel(j).values();
    let corr: f64 = (0..t - 1).map(|s| k[(t - 1, s)] * alpha[s]).sum();
    Ok(base + corr)
}

/// Analysis-mode predictor matrix `M^(t)` of dimension `j`: maps the first
/// `t` elements of the previous block to the element-wise forecasts when
/// every prefix element is replaced by its own forecast.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorMatrix {
    pub t: usize,
    pub m: DMatrix<f64>,
}

/// Builds `M^(t)` through the row recursion
/// `M^(t) = [[M^(t-1), 0], [c_t^T K_{t-1}^{-1} (M^(t-1) - omega I), omega]]`.
pub fn predictor_matrix(model: &QpgpModel, t: usize, j: usize) -> Result<PredictorMatrix> {
    model.check_dim(j)?;
    let p = model.p();
    if t < 1 || t > p {
        return shape_err(format!("prefix length t = {t} outside 1..={p}"));
    }
    let w = model.omega()[j];
    let k = model.kernel(j).values();
    let mut m = DMatrix::zeros(t, t);
    m[(0, 0)] = w;
    if t > 1 {
        let l = leading_factor(model, j, t - 1)?;
        for r in 1..t {
            // K_r^{-1} c via the leading r x r corner of the full factor.
            let lr = l.view((0, 0), (r, r)).clone_owned();
            let c = DVector::from_iterator(r, (0..r).map(|s| k[(r, s)]));
            let g = linalg::cholesky_solve(&lr, &c);
            let mut prev = m.view((0, 0), (r, r)).clone_owned();
            for d in 0..r {
                prev[(d, d)] -= w;
            }
            let row = g.transpose() * prev;
            m.view_mut((r, 0), (1, r)).copy_from(&row);
            m[(r, r)] = w;
        }
    }
    Ok(PredictorMatrix { t, m })
}

/// Per-timestep online forecaster for one iteration.
///
/// Holds one Cholesky factor per dimension and extends the whitened
/// residual `z` by forward substitution as elements are observed, so each
/// forecast costs `O(t)` instead of a fresh `O(t^3)` solve.
#[derive(Clone, Debug)]
pub struct OnlineElementPredictor {
    omega: Vec<f64>,
    factors: Vec<Option<DMatrix<f64>>>,
    prev: ErrorTrajectory,
    z: Vec<DVector<f64>>,
    observed: Vec<usize>,
}

impl OnlineElementPredictor {
    /// Prepares forecasts for the block following `e_i`. Kernels with zero
    /// trace carry no within-iteration information and fall back to the
    /// block forecast.
    pub fn new(model: &QpgpModel, e_i: &ErrorTrajectory) -> Result<Self> {
        model.check_trajectory(e_i)?;
        let p = model.p();
        let mut factors = Vec::with_capacity(model.n());
        for (j, k) in model.kernels().iter().enumerate() {
            if k.values().trace() <= 0.0 {
                factors.push(None);
                continue;
            }
            let (l, _) = linalg::cholesky_with_jitter(k.values(), 1e-12, 1e-8).map_err(|_| {
                Error::Numerical(format!("kernel {j} is numerically singular; raise the psd floor"))
            })?;
            factors.push(Some(l));
        }
        Ok(Self {
            omega: model.omega().to_vec(),
            factors,
            prev: e_i.clone(),
            z: vec![DVector::zeros(p); model.n()],
            observed: vec![0; model.n()],
        })
    }

    fn correction(&self, j: usize, t: usize) -> f64 {
        match &self.factors[j] {
            Some(l) => (0..t).map(|s| l[(t, s)] * self.z[j][s]).sum(),
            None => 0.0,
        }
    }

    /// Forecast of element `t` (0-based) of dimension `j`. Elements
    /// `0..t` must already have been observed.
    pub fn predict(&self, j: usize, t: usize) -> Result<f64> {
        if self.observed[j] != t {
            return Err(Error::State(format!(
                "dimension {j}: forecast for step {t} requested after observing {} steps",
                self.observed[j]
            )));
        }
        Ok(self.omega[j] * self.prev.get(j, t) + self.correction(j, t))
    }

    /// Records the realized error of element `t` of dimension `j`.
    pub fn observe(&mut self, j: usize, t: usize, value: f64) -> Result<()> {
        if self.observed[j] != t {
            return Err(Error::State(format!(
                "dimension {j}: observations must arrive in order (expected step {}, got {t})",
                self.observed[j]
            )));
        }
        if let Some(l) = &self.factors[j] {
            let r = value - self.omega[j] * self.prev.get(j, t);
            let acc: f64 = (0..t).map(|s| l[(t, s)] * self.z[j][s]).sum();
            self.z[j][t] = (r - acc) / l[(t, t)];
        }
        self.observed[j] += 1;
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.prev.p()
    }

    pub fn n(&self) -> usize {
        self.prev.n()
    }
}
