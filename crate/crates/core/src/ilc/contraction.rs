use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::kernels::CovKernel;
use crate::linalg;
use crate::qpgp::{predictor_matrix, QpgpModel};

/// Spectral norm of an iteration-domain error map and what it implies.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractionReport {
    pub norm: f64,
    /// `max_j ||K_j||_2`.
    pub kernel_norm: f64,
    pub satisfied: bool,
    /// Per-iteration covariance injection `2 max_j ||K_j||_2`; the factor 2
    /// comes from the noise entering as a difference of two blocks.
    pub covariance_bound: f64,
}

impl ContractionReport {
    fn new(norm: f64, kernels: &[CovKernel]) -> Self {
        let kernel_norm = kernels.iter().map(CovKernel::spectral_norm).fold(0.0, f64::max);
        Self { norm, kernel_norm, satisfied: norm < 1.0, covariance_bound: 2.0 * kernel_norm }
    }

    /// Limit of the covariance-norm recursion `c <- norm^2 c + C`, or
    /// `None` without contraction.
    pub fn stationary_covariance_bound(&self) -> Option<f64> {
        self.satisfied.then(|| self.covariance_bound / (1.0 - self.norm * self.norm))
    }
}

/// `Omega (x) I_p` in the dimension-major lifted layout.
pub fn lifted_omega(omega: &[f64], p: usize) -> DMatrix<f64> {
    let n = omega.len();
    DMatrix::from_fn(n * p, n * p, |r, c| if r == c { omega[r / p] } else { 0.0 })
}

fn check_maps(g: &DMatrix<f64>, l: &DMatrix<f64>, k: &DMatrix<f64>, np: usize) -> Result<()> {
    let mp = g.ncols();
    if g.nrows() != np {
        return shape_err(format!("G must have {np} rows, has {}", g.nrows()));
    }
    for (name, m) in [("L", l), ("K", k)] {
        if m.nrows() != mp || m.ncols() != np {
            return shape_err(format!("{name} must be {mp}x{np}, is {}x{}", m.nrows(), m.ncols()));
        }
    }
    Ok(())
}

/// Block-mode map `A = I - G L - G K (Omega (x) I_p)`.
pub fn contraction_block(
    g: &DMatrix<f64>,
    l: &DMatrix<f64>,
    k: &DMatrix<f64>,
    omega: &[f64],
    kernels: &[CovKernel],
) -> Result<ContractionReport> {
    let n = omega.len();
    if n == 0 || kernels.len() != n {
        return shape_err("need one kernel per omega");
    }
    let p = kernels[0].size();
    let np = n * p;
    check_maps(g, l, k, np)?;
    let a = DMatrix::identity(np, np) - g * l - g * k * lifted_omega(omega, p);
    Ok(ContractionReport::new(linalg::spectral_norm(&a), kernels))
}

/// Element-mode map on the first `t` samples of every dimension:
/// `B = I - G' L' - G' K' M`, with `M` the block diagonal of per-dimension
/// predictor matrices.
pub fn contraction_element(
    g: &DMatrix<f64>,
    l: &DMatrix<f64>,
    k: &DMatrix<f64>,
    model: &QpgpModel,
    t: usize,
) -> Result<ContractionReport> {
    let (n, p) = (model.n(), model.p());
    check_maps(g, l, k, n * p)?;
    if t < 1 || t > p {
        return shape_err(format!("prefix length t = {t} outside 1..={p}"));
    }
    let m_in = g.ncols() / p;
    if m_in * p != g.ncols() {
        return shape_err("G's column count is not a multiple of p");
    }
    let out_idx: Vec<usize> = (0..n).flat_map(|j| (0..t).map(move |s| j * p + s)).collect();
    let in_idx: Vec<usize> = (0..m_in).flat_map(|j| (0..t).map(move |s| j * p + s)).collect();
    let sub = |m: &DMatrix<f64>, rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
    };
    let gt = sub(g, &out_idx, &in_idx);
    let lt = sub(l, &in_idx, &out_idx);
    let kt = sub(k, &in_idx, &out_idx);
    let mut big_m = DMatrix::zeros(n * t, n * t);
    for j in 0..n {
        let pm = predictor_matrix(model, t, j)?;
        big_m.view_mut((j * t, j * t), (t, t)).copy_from(&pm.m);
    }
    let b = DMatrix::identity(n * t, n * t) - &gt * lt - &gt * kt * big_m;
    Ok(ContractionReport::new(linalg::spectral_norm(&b), model.kernels()))
}
