//! Covariance kernels on the within-iteration timestep grid, plus the
//! projections that turn an empirical covariance into a valid stationary
//! kernel.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::linalg;

/// Tolerance on the smallest eigenvalue accepted as "positive semidefinite",
/// relative to the matrix scale.
const PSD_TOL: f64 = 1e-10;

/// Relative floor applied to eigenvalues by default: `1e-8 * trace / p`.
pub const DEFAULT_FLOOR_REL: f64 = 1e-8;

/// Which kernel family a covariance belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Rbf,
    Periodic,
    /// Purely data-driven covariance with no parametric form.
    General,
}

/// A parametric kernel: variance plus family hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelFamily {
    Rbf { variance: f64, lengthscale: f64 },
    Periodic { variance: f64, lengthscale: f64, period: f64 },
}

impl KernelFamily {
    pub fn kind(&self) -> KernelKind {
        match self {
            KernelFamily::Rbf { .. } => KernelKind::Rbf,
            KernelFamily::Periodic { .. } => KernelKind::Periodic,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            KernelFamily::Rbf { variance, .. } | KernelFamily::Periodic { variance, .. } => variance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelFamily::Rbf { variance, lengthscale } => check_positive(&[
                ("variance", variance),
                ("lengthscale", lengthscale),
            ]),
            KernelFamily::Periodic { variance, lengthscale, period } => check_positive(&[
                ("variance", variance),
                ("lengthscale", lengthscale),
                ("period", period),
            ]),
        }
    }

    /// Kernel value between two timesteps.
    pub fn eval(&self, t: f64, t2: f64) -> Result<f64> {
        match *self {
            KernelFamily::Rbf { variance, lengthscale } => eval_rbf(t, t2, variance, lengthscale),
            KernelFamily::Periodic { variance, lengthscale, period } => {
                eval_periodic(t, t2, variance, lengthscale, period)
            }
        }
    }

    /// Evaluation without parameter checks, for inner loops that validated once.
    fn eval_unchecked(&self, lag: f64) -> f64 {
        match *self {
            KernelFamily::Rbf { variance, lengthscale } => {
                variance * (-(lag * lag) / (2.0 * lengthscale * lengthscale)).exp()
            }
            KernelFamily::Periodic { variance, lengthscale, period } => {
                let s = (PI * lag / period).sin();
                variance * (-2.0 * s * s / (lengthscale * lengthscale)).exp()
            }
        }
    }
}

fn check_positive(params: &[(&str, f64)]) -> Result<()> {
    for (name, v) in params {
        if !(*v > 0.0) || !v.is_finite() {
            return param_err(format!("{name} must be positive and finite, got {v}"));
        }
    }
    Ok(())
}

pub fn eval_rbf(t: f64, t2: f64, variance: f64, lengthscale: f64) -> Result<f64> {
    check_positive(&[("variance", variance), ("lengthscale", lengthscale)])?;
    let d = t - t2;
    Ok(variance * (-(d * d) / (2.0 * lengthscale * lengthscale)).exp())
}

pub fn eval_periodic(t: f64, t2: f64, variance: f64, lengthscale: f64, period: f64) -> Result<f64> {
    check_positive(&[("variance", variance), ("lengthscale", lengthscale), ("period", period)])?;
    let s = (PI * (t - t2) / period).sin();
    Ok(variance * (-2.0 * s * s / (lengthscale * lengthscale)).exp())
}

/// A symmetric positive-semidefinite `p x p` covariance over one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct CovKernel {
    values: DMatrix<f64>,
    stationary: bool,
}

impl CovKernel {
    /// Validates symmetry and positive semidefiniteness. The stationary flag
    /// is derived from the values.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() || values.nrows() == 0 {
            return shape_err(format!(
                "covariance must be square and non-empty, got {}x{}",
                values.nrows(),
                values.ncols()
            ));
        }
        if !linalg::is_symmetric(&values, 1e-12) {
            return shape_err("covariance must be symmetric");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("covariance has non-finite entries".into()));
        }
        let scale = values.amax().max(1.0);
        let min_eig = linalg::min_eigenvalue(&values);
        if min_eig < -PSD_TOL * scale {
            return Err(Error::Numerical(format!(
                "covariance is not positive semidefinite (min eigenvalue {min_eig:.3e})"
            )));
        }
        Ok(Self::from_trusted(values))
    }

    /// Wraps a matrix already known to be symmetric PSD.
    pub(crate) fn from_trusted(mut values: DMatrix<f64>) -> Self {
        linalg::symmetrize(&mut values);
        let stationary = is_toeplitz(&values, 1e-10);
        Self { values, stationary }
    }

    pub fn identity(p: usize) -> Self {
        Self { values: DMatrix::identity(p, p), stationary: true }
    }

    pub fn zeros(p: usize) -> Self {
        Self { values: DMatrix::zeros(p, p), stationary: true }
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn is_stationary(&self) -> bool {
        self.stationary
    }

    pub fn spectral_norm(&self) -> f64 {
        let eig = SymmetricEigen::new(self.values.clone()).eigenvalues;
        eig.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    /// `1e-8 * trace / p`, or zero for an all-zero kernel.
    pub fn default_floor(&self) -> f64 {
        default_floor(&self.values)
    }
}

pub fn default_floor(m: &DMatrix<f64>) -> f64 {
    let p = m.nrows().max(1) as f64;
    (DEFAULT_FLOOR_REL * m.trace() / p).max(0.0)
}

/// True when every diagonal of `m` is constant to within `rel_tol`.
pub fn is_toeplitz(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    let p = m.nrows();
    let tol = rel_tol * m.amax().max(1.0);
    for d in 0..p {
        let first_upper = m[(0, d)];
        let first_lower = m[(d, 0)];
        for a in 0..(p - d) {
            if (m[(a, a + d)] - first_upper).abs() > tol || (m[(a + d, a)] - first_lower).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// Evaluates the kernel on the unit-spaced grid `1..=p`.
pub fn build_cov_matrix(family: &KernelFamily, p: usize) -> Result<CovKernel> {
    if p == 0 {
        return param_err("kernel size must be at least 1");
    }
    family.validate()?;
    // Stationary on a uniform grid: evaluate once per lag.
    let lags: Vec<f64> = (0..p).map(|d| family.eval_unchecked(d as f64)).collect();
    let values = DMatrix::from_fn(p, p, |a, b| lags[a.abs_diff(b)]);
    Ok(CovKernel { values, stationary: true })
}

/// Frobenius-nearest symmetric Toeplitz matrix: each lag takes the mean of
/// all entries at offsets `+d` and `-d`.
pub fn toeplitz_project(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return shape_err(format!("expected a square matrix, got {}x{}", m.nrows(), m.ncols()));
    }
    let p = m.nrows();
    let mut lag_mean = vec![0.0; p];
    for (d, slot) in lag_mean.iter_mut().enumerate() {
        let mut sum = 0.0;
        for a in 0..(p - d) {
            sum += m[(a, a + d)];
            if d > 0 {
                sum += m[(a + d, a)];
            }
        }
        let count = if d == 0 { p } else { 2 * (p - d) };
        *slot = sum / count as f64;
    }
    Ok(DMatrix::from_fn(p, p, |a, b| lag_mean[a.abs_diff(b)]))
}

/// Clips eigenvalues below `floor` up to `floor` and reconstructs.
pub fn psd_truncate(m: &DMatrix<f64>, floor: f64) -> Result<CovKernel> {
    if !m.is_square() {
        return shape_err(format!("expected a square matrix, got {}x{}", m.nrows(), m.ncols()));
    }
    if !linalg::is_symmetric(m, 1e-10) {
        return shape_err("psd truncation needs a symmetric matrix");
    }
    if !(floor >= 0.0) {
        return param_err(format!("floor must be non-negative, got {floor}"));
    }
    // A successful factorization of m - floor*I already proves every
    // eigenvalue exceeds the floor, and is far cheaper than the eigensolver.
    let mut shifted = m.clone();
    for i in 0..shifted.nrows() {
        shifted[(i, i)] -= floor;
    }
    if linalg::cholesky_lower(shifted).is_ok() {
        return Ok(CovKernel::from_trusted(m.clone()));
    }
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return Ok(CovKernel::from_trusted(m.clone()));
    }
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= clipped[j];
    }
    Ok(CovKernel::from_trusted(scaled * q.transpose()))
}

/// Bounds on kernel hyperparameters for the Frobenius fit, inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamBox {
    pub variance: (f64, f64),
    pub lengthscale: (f64, f64),
    pub period: (f64, f64),
}

impl ParamBox {
    /// Default box for a `p x p` target: lengthscale in `[0.05, 10p]`, period
    /// in `[2, 2p]`, variance from `1e-10` up to a multiple of the target's
    /// largest diagonal entry.
    pub fn for_target(target: &DMatrix<f64>) -> Self {
        let p = target.nrows().max(1) as f64;
        let diag_max = target.diagonal().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        Self {
            variance: (1e-10, (1e3 * diag_max).max(1e-6)),
            lengthscale: (0.05, 10.0 * p),
            period: (2.0, (2.0 * p).max(2.0)),
        }
    }

    fn check(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("variance", self.variance),
            ("lengthscale", self.lengthscale),
            ("period", self.period),
        ] {
            if !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() {
                return Err(Error::Config(format!("empty or invalid {name} box [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub bounds: Option<ParamBox>,
    pub starts: usize,
    pub seed: u64,
    pub max_evals_per_start: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { bounds: None, starts: 8, seed: 0, max_evals_per_start: 4000 }
    }
}

/// Result of a Frobenius kernel fit, with the objective at the optimum and
/// at each multi-start initial point.
#[derive(Clone, Debug)]
pub struct FrobeniusFit {
    pub family: KernelFamily,
    pub objective: f64,
    pub start_objectives: Vec<f64>,
}

/// Kernel matrices on the grid are Toeplitz, so the Frobenius objective
/// splits into the target's distance to its Toeplitz projection (constant)
/// plus a weighted sum over lags.
struct FitProblem {
    lag_means: Vec<f64>,
    lag_weights: Vec<f64>,
    off_toeplitz_sq: f64,
    kind: KernelKind,
    bounds: ParamBox,
}

impl FitProblem {
    fn new(target: &DMatrix<f64>, kind: KernelKind, bounds: ParamBox) -> Result<Self> {
        let projected = toeplitz_project(target)?;
        let p = target.nrows();
        let lag_means = (0..p).map(|d| projected[(d, 0)]).collect();
        let lag_weights = (0..p).map(|d| if d == 0 { p as f64 } else { 2.0 * (p - d) as f64 }).collect();
        let off_toeplitz_sq = (target - &projected).norm_squared();
        Ok(Self { lag_means, lag_weights, off_toeplitz_sq, kind, bounds })
    }

    /// Log-space box: `[log var, log ell]` or `[log var, log ell, log T]`.
    fn log_bounds(&self) -> Vec<(f64, f64)> {
        let b = &self.bounds;
        let mut v = vec![
            (b.variance.0.ln(), b.variance.1.ln()),
            (b.lengthscale.0.ln(), b.lengthscale.1.ln()),
        ];
        if self.kind == KernelKind::Periodic {
            v.push((b.period.0.ln(), b.period.1.ln()));
        }
        v
    }

    /// Maps a log coordinate back to parameter space, returning bounds
    /// exactly when the coordinate sits on them.
    fn linear(&self, x: &[f64], k: usize) -> f64 {
        let (lo, hi) = match k {
            0 => self.bounds.variance,
            1 => self.bounds.lengthscale,
            _ => self.bounds.period,
        };
        if x[k] <= lo.ln() {
            lo
        } else if x[k] >= hi.ln() {
            hi
        } else {
            x[k].exp().clamp(lo, hi)
        }
    }

    fn family(&self, x: &[f64]) -> KernelFamily {
        match self.kind {
            KernelKind::Rbf => KernelFamily::Rbf {
                variance: self.linear(x, 0),
                lengthscale: self.linear(x, 1),
            },
            _ => KernelFamily::Periodic {
                variance: self.linear(x, 0),
                lengthscale: self.linear(x, 1),
                period: self.linear(x, 2),
            },
        }
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let family = self.family(x);
        let mut sum = self.off_toeplitz_sq;
        for (d, (&tau, &w)) in self.lag_means.iter().zip(&self.lag_weights).enumerate() {
            let r = tau - family.eval_unchecked(d as f64);
            sum += w * r * r;
        }
        sum.sqrt()
    }
}

/// Fits `(variance, theta)` minimizing `||target - K(variance, theta)||_F`.
///
/// Multi-start compass search in log coordinates, clamped to the box. A final
/// pass moves any coordinate onto a bound when that does not worsen the
/// objective, so flat directions resolve to the box edge.
pub fn frobenius_fit(target: &DMatrix<f64>, kind: KernelKind, options: &FitOptions) -> Result<FrobeniusFit> {
    if !target.is_square() || target.nrows() == 0 {
        return shape_err("fit target must be a non-empty square matrix");
    }
    if !linalg::is_symmetric(target, 1e-10) {
        return shape_err("fit target must be symmetric");
    }
    if kind == KernelKind::General {
        return Err(Error::Config("the general kernel has no parameters to fit".into()));
    }
    let bounds = options.bounds.unwrap_or_else(|| ParamBox::for_target(target));
    bounds.check()?;
    if options.starts == 0 {
        return Err(Error::Config("frobenius fit needs at least one start".into()));
    }

    let problem = FitProblem::new(target, kind, bounds)?;
    let lb = problem.log_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut start_objectives = Vec::with_capacity(options.starts);

    for _ in 0..options.starts {
        let x0: Vec<f64> = lb
            .iter()
            .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
            .collect();
        start_objectives.push(problem.objective(&x0));
        let (x, f) = compass_search(&problem, x0, &lb, options.max_evals_per_start);
        if best.as_ref().is_none_or(|(_, fb)| f < *fb) {
            best = Some((x, f));
        }
    }

    let (mut x, mut f) = best.expect("at least one start");
    for k in 0..x.len() {
        for edge in [lb[k].0, lb[k].1] {
            let mut y = x.clone();
            y[k] = edge;
            let fy = problem.objective(&y);
            if fy <= f {
                x = y;
                f = fy;
            }
        }
    }

    Ok(FrobeniusFit { family: problem.family(&x), objective: f, start_objectives })
}

fn compass_search(
    problem: &FitProblem,
    mut x: Vec<f64>,
    lb: &[(f64, f64)],
    max_evals: usize,
) -> (Vec<f64>, f64) {
    let mut f = problem.objective(&x);
    let mut steps: Vec<f64> = lb.iter().map(|&(lo, hi)| ((hi - lo) * 0.25).max(1e-3)).collect();
    let mut evals = 1;
    while evals < max_evals && steps.iter().any(|&s| s > 1e-10) {
        let mut improved = false;
        for k in 0..x.len() {
            if steps[k] <= 1e-10 {
                continue;
            }
            for dir in [-1.0, 1.0] {
                let mut y = x.clone();
                y[k] = (y[k] + dir * steps[k]).clamp(lb[k].0, lb[k].1);
                if y[k] == x[k] {
                    continue;
                }
                let fy = problem.objective(&y);
                evals += 1;
                if fy < f {
                    x = y;
                    f = fy;
                    improved = true;
                    // Expand after a success along this coordinate.
                    steps[k] *= 2.0;
                    break;
                }
            }
        }
        if !improved {
            for s in steps.iter_mut() {
                *s *= 0.5;
            }
        }
    }
    (x, f)
}
