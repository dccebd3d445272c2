//! Variational inducing-point GP (collapsed bound).
//!
//! With `Kmn` the cross-covariance between inducing and training inputs,
//! `P = Kmn Knm` and `b = Kmn y`, the predictive mean is
//! `K*m S^-1 b / noise` where `S = Kmm + P / noise`, and the bound is
//! `log N(y | 0, Qnn + noise I) - tr(Knn - Qnn) / (2 noise)` with
//! `Qnn = Knm Kmm^-1 Kmn`, evaluated through `M x M` factorizations only.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{param_err, Error, Result};
use crate::linalg;

use super::{GpDataset, GpKernel, GpPoint};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseOptions {
    /// Lloyd sweeps for placing the inducing inputs.
    pub kmeans_iters: usize,
    /// Budget of bound evaluations for the local refinement.
    pub refine_evals: usize,
    /// Initial refinement step in lengthscale units.
    pub refine_step: f64,
    pub seed: u64,
}

impl Default for SparseOptions {
    fn default() -> Self {
        Self { kmeans_iters: 20, refine_evals: 40, refine_step: 0.5, seed: 0 }
    }
}

/// Lloyd's k-means in the given coordinates. Starts from `init` when given
/// (its length fixes `k`), otherwise from k-means++ seeding.
pub fn kmeans(points: &[GpPoint], k: usize, iters: usize, init: Option<&[GpPoint]>, seed: u64) -> Vec<GpPoint> {
    assert!(k >= 1 && k <= points.len());
    let dist2 = |a: GpPoint, b: GpPoint| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let mut centers: Vec<GpPoint> = match init {
        Some(c) => c.to_vec(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut centers = vec![points[rng.random_range(0..points.len())]];
            let mut best: Vec<f64> = points.iter().map(|&x| dist2(x, centers[0])).collect();
            while centers.len() < k {
                let total: f64 = best.iter().sum();
                let next = if total > 0.0 {
                    let mut target = rng.random_range(0.0..total);
                    let mut idx = points.len() - 1;
                    for (i, d) in best.iter().enumerate() {
                        if target < *d {
                            idx = i;
                            break;
                        }
                        target -= d;
                    }
                    idx
                } else {
                    rng.random_range(0..points.len())
                };
                let c = points[next];
                for (b, &x) in best.iter_mut().zip(points) {
                    *b = b.min(dist2(x, c));
                }
                centers.push(c);
            }
            centers
        }
    };
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..iters {
        let mut changed = false;
        for (a, &x) in assign.iter_mut().zip(points) {
            let mut best = (f64::INFINITY, 0);
            for (c, &z) in centers.iter().enumerate() {
                let d = dist2(x, z);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if *a != best.1 {
                *a = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0, 0.0, 0.0]; centers.len()];
        for (&a, &x) in assign.iter().zip(points) {
            sums[a][0] += x[0];
            sums[a][1] += x[1];
            sums[a][2] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            // Empty clusters keep their previous center.
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
    }
    centers
}

/// A fitted sparse GP. Keeps the `M x N` cross-covariance so single
/// inducing points can be moved at `O(NM + M^3)` cost.
#[derive(Clone, Debug)]
pub struct SparseGp {
    kernel: GpKernel,
    noise: f64,
    inducing: Vec<GpPoint>,
    inputs: Vec<GpPoint>,
    targets: DVector<f64>,
    kmn: DMatrix<f64>,
    kmm: DMatrix<f64>,
    p: DMatrix<f64>,
    b: DVector<f64>,
    yy: f64,
    // Posterior pieces, refreshed by `refresh`.
    weights: DVector<f64>,
    elbo: f64,
}

fn check_inputs(kernel: &GpKernel, noise: f64) -> Result<()> {
    kernel.validate()?;
    if !(noise > 0.0 && noise.is_finite()) {
        return param_err(format!("noise variance must be positive, got {noise}"));
    }
    Ok(())
}

/// Fits with `m` inducing inputs placed by k-means (in lengthscale-scaled
/// coordinates) and refined on the variational bound. `warm` replaces the
/// k-means++ seeding with previous inducing inputs.
pub fn fit_sparse_gp(
    data: &GpDataset,
    m: usize,
    kernel: GpKernel,
    noise: f64,
    options: &SparseOptions,
    warm: Option<&[GpPoint]>,
) -> Result<SparseGp> {
    check_inputs(&kernel, noise)?;
    if data.is_empty() {
        return Err(Error::InsufficientData("sparse GP needs at least one training point".into()));
    }
    if m == 0 {
        return param_err("need at least one inducing point");
    }
    let m = if m > data.len() {
        log::warn!("{m} inducing points requested for {} training points; using {}", data.len(), data.len());
        data.len()
    } else {
        m
    };
    let scaled: Vec<GpPoint> = data.inputs().iter().map(|&x| kernel.normalize(x)).collect();
    let warm_scaled: Option<Vec<GpPoint>> =
        warm.filter(|w| w.len() == m).map(|w| w.iter().map(|&z| kernel.normalize(z)).collect());
    let centers = kmeans(&scaled, m, options.kmeans_iters, warm_scaled.as_deref(), options.seed);
    let inducing: Vec<GpPoint> = centers.into_iter().map(|z| kernel.denormalize(z)).collect();
    let mut gp = SparseGp::with_inducing(data, inducing, kernel, noise)?;
    gp.refine(options.refine_evals, options.refine_step)?;
    Ok(gp)
}

impl SparseGp {
    /// Builds the posterior for fixed inducing inputs.
    pub fn with_inducing(data: &GpDataset, inducing: Vec<GpPoint>, kernel: GpKernel, noise: f64) -> Result<Self> {
        check_inputs(&kernel, noise)?;
        if inducing.is_empty() {
            return param_err("need at least one inducing point");
        }
        let x = data.inputs().to_vec();
        let y = DVector::from_column_slice(data.targets());
        let (m, n) = (inducing.len(), x.len());
        let kmn = DMatrix::from_fn(m, n, |a, c| kernel.eval(inducing[a], x[c]));
        let kmm = DMatrix::from_fn(m, m, |a, c| kernel.eval(inducing[a], inducing[c]));
        let p = &kmn * kmn.transpose();
        let b = &kmn * &y;
        let yy = y.norm_squared();
        let mut gp = Self {
            kernel,
            noise,
            inducing,
            inputs: x,
            targets: y,
            kmn,
            kmm,
            p,
            b,
            yy,
            weights: DVector::zeros(m),
            elbo: f64::NEG_INFINITY,
        };
        gp.refresh()?;
        Ok(gp)
    }

    /// Recomputes the bound and predictive weights from the cached matrices.
    fn refresh(&mut self) -> Result<()> {
        let (elbo, weights) = self.evaluate()?;
        self.elbo = elbo;
        self.weights = weights;
        Ok(())
    }

    fn evaluate(&self) -> Result<(f64, DVector<f64>)> {
        let n = self.inputs.len() as f64;
        let s2 = self.noise;
        let (lm, jitter) = linalg::cholesky_with_jitter(&self.kmm, 1e-10, 1e-6)?;
        let mut sigma = &self.p / s2;
        for a in 0..sigma.nrows() {
            for c in 0..sigma.ncols() {
                sigma[(a, c)] += self.kmm[(a, c)];
            }
            sigma[(a, a)] += jitter;
        }
        let (ls, _) = linalg::cholesky_with_jitter(&sigma, 1e-12, 1e-6)?;
        let beta = linalg::cholesky_solve(&ls, &self.b);
        let logdet = |l: &DMatrix<f64>| 2.0 * (0..l.nrows()).map(|d| l[(d, d)].ln()).sum::<f64>();
        let quad = (self.yy - self.b.dot(&beta) / s2) / s2;
        let tr_q = linalg::cholesky_inverse(&lm).dot(&self.p);
        let tr_knn = n * self.kernel.variance;
        let elbo = -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet(&ls) - logdet(&lm) + n * s2.ln() + quad)
            - (tr_knn - tr_q) / (2.0 * s2);
        Ok((elbo, beta / s2))
    }

    /// Moves inducing point `a` to `z`, updating the cached matrices.
    fn move_point(&mut self, a: usize, z: GpPoint) {
        self.inducing[a] = z;
        let row = DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|&x| self.kernel.eval(z, x)));
        self.kmn.set_row(a, &row.transpose());
        let prow = &self.kmn * &row;
        self.p.set_column(a, &prow);
        self.p.set_row(a, &prow.transpose());
        self.b[a] = row.dot(&self.targets);
        for c in 0..self.inducing.len() {
            let v = self.kernel.eval(z, self.inducing[c]);
            self.kmm[(a, c)] = v;
            self.kmm[(c, a)] = v;
        }
    }

    /// Compass search on single inducing coordinates: a move is kept only
    /// when it raises the bound. Stops after `budget` bound evaluations.
    pub fn refine(&mut self, budget: usize, step: f64) -> Result<()> {
        if budget == 0 || self.inputs.is_empty() {
            return Ok(());
        }
        let lo = [
            self.inputs.iter().map(|x| x[0]).fold(f64::INFINITY, f64::min),
            self.inputs.iter().map(|x| x[1]).fold(f64::INFINITY, f64::min),
        ];
        let hi = [
            self.inputs.iter().map(|x| x[0]).fold(f64::NEG_INFINITY, f64::max),
            self.inputs.iter().map(|x| x[1]).fold(f64::NEG_INFINITY, f64::max),
        ];
        let scale = [self.kernel.iteration_lengthscale, self.kernel.time_lengthscale];
        let m = self.inducing.len();
        let mut steps = vec![[step * scale[0], step * scale[1]]; m];
        let mut evals = 0;
        let mut cursor = 0usize;
        'outer: while evals < budget {
            let a = cursor % m;
            let c = (cursor / m) % 2;
            cursor += 1;
            let start = self.inducing[a];
            let mut improved = false;
            for dir in [1.0, -1.0] {
                let mut z = start;
                z[c] = (z[c] + dir * steps[a][c]).clamp(lo[c], hi[c]);
                if z == start {
                    continue;
                }
                self.move_point(a, z);
                let ok = self.evaluate();
                evals += 1;
                match ok {
                    Ok((elbo, w)) if elbo > self.elbo => {
                        self.elbo = elbo;
                        self.weights = w;
                        improved = true;
                        break;
                    }
                    _ => self.move_point(a, start),
                }
                if evals >= budget {
                    break 'outer;
                }
            }
            steps[a][c] *= if improved { 2.0 } else { 0.5 };
        }
        Ok(())
    }

    pub fn predict(&self, queries: &[GpPoint]) -> DVector<f64> {
        DVector::from_iterator(
            queries.len(),
            queries
                .iter()
                .map(|&q| self.inducing.iter().zip(self.weights.iter()).map(|(&z, w)| self.kernel.eval(q, z) * w).sum()),
        )
    }

    pub fn elbo(&self) -> f64 {
        self.elbo
    }

    pub fn inducing(&self) -> &[GpPoint] {
        &self.inducing
    }

    pub fn kernel(&self) -> &GpKernel {
        &self.kernel
    }
}
