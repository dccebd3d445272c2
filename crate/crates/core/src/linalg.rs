//! Small dense linear-algebra helpers on top of nalgebra.
//!
//! The blocked Cholesky here exists because nalgebra's factorization is
//! unblocked and the full-history GP baseline factors matrices with several
//! thousand rows every iteration.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const BLOCK: usize = 96;

/// Largest absolute asymmetry `|a_ij - a_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// True when `m` is square and symmetric up to a tolerance relative to its
/// largest entry.
pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    asymmetry(m) <= rel_tol * scale
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
///
/// Right-looking blocked variant: panels are factored column by column and
/// the trailing lower triangle is updated through matrix products. Only the
/// lower triangle of `a` is read. Fails with the index of the first
/// non-positive pivot.
pub fn cholesky_lower(mut a: DMatrix<f64>) -> std::result::Result<DMatrix<f64>, usize> {
    let n = a.nrows();
    assert!(a.is_square());
    let mut k = 0;
    while k < n {
        let kb = BLOCK.min(n - k);
        // Panel: columns k..k+kb, rows k..n. Earlier panels are already
        // folded into these entries by the trailing updates.
        for j in k..k + kb {
            for q in k..j {
                let ljq = a[(j, q)];
                if ljq != 0.0 {
                    for r in j..n {
                        let v = a[(r, q)];
                        a[(r, j)] -= v * ljq;
                    }
                }
            }
            let d = a[(j, j)];
            if !(d > 0.0) || !d.is_finite() {
                return Err(j);
            }
            let s = d.sqrt();
            a[(j, j)] = s;
            let inv = 1.0 / s;
            for r in (j + 1)..n {
                a[(r, j)] *= inv;
            }
        }
        let rest = k + kb;
        if rest < n {
            let panel = a.view((rest, k), (n - rest, kb)).clone_owned();
            let mut c = rest;
            while c < n {
                let cb = BLOCK.min(n - c);
                let lower = panel.rows(c - rest, n - c);
                let top = panel.rows(c - rest, cb);
                let mut target = a.view_mut((c, c), (n - c, cb));
                target.gemm(-1.0, &lower, &top.transpose(), 1.0);
                c += cb;
            }
        }
        k = rest;
    }
    // Clear the strict upper triangle so the result is a proper factor.
    for j in 1..n {
        for i in 0..j {
            a[(i, j)] = 0.0;
        }
    }
    Ok(a)
}

/// Cholesky with diagonal jitter escalation. Returns the factor and the
/// jitter that was finally added (0 when none was needed).
pub fn cholesky_with_jitter(
    a: &DMatrix<f64>,
    start: f64,
    max: f64,
) -> Result<(DMatrix<f64>, f64)> {
    if let Ok(l) = cholesky_lower(a.clone()) {
        return Ok((l, 0.0));
    }
    let scale = (a.trace() / a.nrows().max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = start;
    while jitter <= max * (1.0 + 1e-12) {
        let mut b = a.clone();
        for i in 0..b.nrows() {
            b[(i, i)] += jitter * scale;
        }
        if let Ok(l) = cholesky_lower(b) {
            return Ok((l, jitter * scale));
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "matrix of size {} is not positive definite even with jitter {:.0e}",
        a.nrows(),
        max
    )))
}

/// Solves `L x = b` in place for lower-triangular `L`.
pub fn forward_substitute(l: &DMatrix<f64>, b: &mut DVector<f64>) {
    let n = l.nrows();
    for j in 0..n {
        let x = b[j] / l[(j, j)];
        b[j] = x;
        if x != 0.0 {
            for r in (j + 1)..n {
                b[r] -= l[(r, j)] * x;
            }
        }
    }
}

/// Solves `L^T x = b` in place for lower-triangular `L`.
pub fn backward_substitute_transposed(l: &DMatrix<f64>, b: &mut DVector<f64>) {
    let n = l.nrows();
    for j in (0..n).rev() {
        let col = l.column(j);
        let mut s = b[j];
        for r in (j + 1)..n {
            s -= col[r] * b[r];
        }
        b[j] = s / l[(j, j)];
    }
}

/// Solves `(L L^T) x = b` given the lower factor.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut x = b.clone();
    forward_substitute(l, &mut x);
    backward_substitute_transposed(l, &mut x);
    x
}

/// Solves `L X = B` for a matrix right-hand side (column by column).
pub fn forward_substitute_matrix(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    for c in 0..b.ncols() {
        let mut col = b.column_mut(c);
        for j in 0..n {
            let x = col[j] / l[(j, j)];
            col[j] = x;
            if x != 0.0 {
                for r in (j + 1)..n {
                    col[r] -= l[(r, j)] * x;
                }
            }
        }
    }
}

/// Inverse of `L L^T` from its lower factor.
pub fn cholesky_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut linv = DMatrix::<f64>::identity(n, n);
    forward_substitute_matrix(l, &mut linv);
    linv.transpose() * linv
}
