use nalgebra::{DMatrix, DVector};

use crate::error::{shape_err, Error, Result};

use super::{ErrorHistory, QpgpModel};

/// Largest conditioning set the dense oracle will factor.
pub const ORACLE_MAX_SIZE: usize = 5000;

/// Exact Gaussian conditional mean of the unobserved part of block `i + 1`
/// in dimension `j`, given every past block and `prefix`.
///
/// Builds the stacked covariance `omega^|a-b| K / (1 - omega^2)` over all
/// `i + 1` blocks and conditions densely. Meant as a test oracle: cost is
/// cubic in `i p`.
pub fn brute_force_conditional_mean(
    model: &QpgpModel,
    history: &ErrorHistory,
    prefix: &[f64],
    j: usize,
) -> Result<DVector<f64>> {
    model.check_dim(j)?;
    let p = model.p();
    if history.n() != model.n() || history.p() != p {
        return shape_err("history does not match the model's (n, p)");
    }
    if prefix.len() > p {
        return shape_err(format!("prefix of length {} exceeds p = {p}", prefix.len()));
    }
    let i = history.len();
    let n_obs = i * p + prefix.len();
    if n_obs > ORACLE_MAX_SIZE {
        return Err(Error::TooLarge(format!(
            "conditioning set of {n_obs} points exceeds {ORACLE_MAX_SIZE}; use fewer blocks or a shorter period"
        )));
    }
    let w = model.omega()[j];
    let k = model.kernel(j).values();
    let total = (i + 1) * p;
    let stat = 1.0 / (1.0 - w * w);
    let cov = DMatrix::from_fn(total, total, |a, b| {
        let lag = (a / p).abs_diff(b / p) as i32;
        w.powi(lag) * k[(a % p, b % p)] * stat
    });
    let mut obs = DVector::zeros(n_obs);
    for (bi, block) in history.blocks().iter().enumerate() {
        obs.rows_mut(bi * p, p).copy_from(&block.block(j));
    }
    for (s, v) in prefix.iter().enumerate() {
        obs[i * p + s] = *v;
    }
    conditional_mean(&cov, &obs)
}

/// Mean of the trailing coordinates of a zero-mean Gaussian with covariance
/// `cov`, given that its leading `obs.len()` coordinates equal `obs`.
pub fn conditional_mean(cov: &DMatrix<f64>, obs: &DVector<f64>) -> Result<DVector<f64>> {
    let n_obs = obs.len();
    let n_rest = cov.nrows() - n_obs;
    if n_obs == 0 {
        return Ok(DVector::zeros(n_rest));
    }
    let s_oo = cov.view((0, 0), (n_obs, n_obs)).clone_owned();
    let s_ro = cov.view((n_obs, 0), (n_rest, n_obs));
    let chol = s_oo
        .cholesky()
        .ok_or_else(|| Error::Numerical("observed covariance is singular".into()))?;
    Ok(s_ro * chol.solve(obs))
}
