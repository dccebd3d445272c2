//! Two-stage estimation of `(omega_j, K_j)`.
//!
//! Stage 1 alternates between the closed-form `omega` given `K` and the
//! residual scatter given `omega`, minimizing the likelihood of the
//! residuals `e_k - omega e_{k-1}` (the first block's marginal is left out).
//! Stage 2 averages the result along its diagonals and clips it to PSD.
//!
//! Everything stage 1 needs is held in three `p x p` lag statistics, so
//! absorbing a new block is `O(p^2)` and re-estimating is `O(p^3)` no matter
//! how many iterations came before.

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernels::{
    build_cov_matrix, default_floor, frobenius_fit, psd_truncate, toeplitz_project, CovKernel, FitOptions,
    KernelKind, DEFAULT_FLOOR_REL,
};
use crate::linalg;
use crate::trajectory::ErrorTrajectory;

use super::{ErrorHistory, QpgpModel};

/// Running sums `S00 = sum e_{k-1} e_{k-1}^T`, `S11 = sum e_k e_k^T` and
/// `S10 = sum e_k e_{k-1}^T` over consecutive block pairs of one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct LagStats {
    p: usize,
    pairs: usize,
    s00: DMatrix<f64>,
    s11: DMatrix<f64>,
    s10: DMatrix<f64>,
    last: Option<DVector<f64>>,
}

impl LagStats {
    pub fn new(p: usize) -> Self {
        Self {
            p,
            pairs: 0,
            s00: DMatrix::zeros(p, p),
            s11: DMatrix::zeros(p, p),
            s10: DMatrix::zeros(p, p),
            last: None,
        }
    }

    pub fn from_blocks(blocks: &[DVector<f64>]) -> Result<Self> {
        let p = blocks.first().map_or(0, |b| b.len());
        let mut stats = Self::new(p);
        for b in blocks {
            stats.push(b.as_view())?;
        }
        Ok(stats)
    }

    pub fn push(&mut self, x: DVectorView<'_, f64>) -> Result<()> {
        if x.len() != self.p {
            return shape_err(format!("block of length {} pushed into lag statistics of size {}", x.len(), self.p));
        }
        let x = x.into_owned();
        if let Some(prev) = self.last.take() {
            self.s00.ger(1.0, &prev, &prev, 1.0);
            self.s11.ger(1.0, &x, &x, 1.0);
            self.s10.ger(1.0, &x, &prev, 1.0);
            self.pairs += 1;
        }
        self.last = Some(x);
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of consecutive block pairs absorbed (`i - 1`).
    pub fn pairs(&self) -> usize {
        self.pairs
    }

    /// `sum_k (e_k - omega e_{k-1})(e_k - omega e_{k-1})^T`.
    pub fn residual_scatter(&self, omega: f64) -> DMatrix<f64> {
        let mut r = self.s11.clone();
        let w2 = omega * omega;
        for c in 0..self.p {
            for a in 0..self.p {
                r[(a, c)] += w2 * self.s00[(a, c)] - omega * (self.s10[(a, c)] + self.s10[(c, a)]);
            }
        }
        r
    }

    /// Closed-form `omega` for a fixed positive-definite `K`:
    /// `tr(K^-1 S10) / tr(K^-1 S00)`, unclipped. `None` when the
    /// denominator vanishes.
    pub fn omega_given_kernel(&self, k: &DMatrix<f64>) -> Result<Option<f64>> {
        let l = linalg::cholesky_lower(k.clone())
            .map_err(|_| Error::Numerical("kernel passed to the omega step is not positive definite".into()))?;
        let kinv = linalg::cholesky_inverse(&l);
        Ok(omega_ratio(&kinv, &self.s10, &self.s00))
    }
}

fn omega_ratio(kinv: &DMatrix<f64>, s10: &DMatrix<f64>, s00: &DMatrix<f64>) -> Option<f64> {
    // K^-1 is symmetric, so tr(K^-1 S) is the Frobenius product.
    let num = kinv.dot(s10);
    let den = kinv.dot(s00);
    (den > 0.0).then(|| num / den)
}

/// Constraint on the stage-1 covariance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovStructure {
    /// Full symmetric matrix.
    Unconstrained,
    /// The `omega` step is weighted by a stationary (Toeplitz) version of
    /// the covariance; the returned `K~` is still the raw residual scatter.
    Stationary,
    /// Stationary while there are fewer residual blocks than samples per
    /// block, unconstrained afterwards. With fewer than `p` residuals the
    /// unconstrained covariance is singular and its null space pins `omega`
    /// to wherever the alternation started.
    #[default]
    Auto,
}

impl CovStructure {
    pub fn resolve(self, pairs: usize, p: usize) -> CovStructure {
        match self {
            CovStructure::Auto if pairs < p => CovStructure::Stationary,
            CovStructure::Auto => CovStructure::Unconstrained,
            other => other,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Options {
    pub max_alternations: usize,
    pub tol: f64,
    /// `omega` is clipped to `[-omega_max, omega_max]`.
    pub omega_max: f64,
    /// Ridge added before inverting, relative to `trace / p`.
    pub floor_rel: f64,
    pub structure: CovStructure,
}

impl Default for Stage1Options {
    fn default() -> Self {
        Self {
            max_alternations: 100,
            tol: 1e-6,
            omega_max: 0.999,
            floor_rel: DEFAULT_FLOOR_REL,
            structure: CovStructure::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Estimate {
    pub omega: f64,
    pub k_tilde: DMatrix<f64>,
    pub alternations: usize,
    /// Reduced negative log-likelihood after each covariance step.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub structure: CovStructure,
}

/// Ridge by `floor`, falling back to eigenvalue clipping when that is not
/// enough. Returns the lower Cholesky factor of the regularized matrix.
fn regularized_factor(k: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    let mut ridged = k.clone();
    for i in 0..ridged.nrows() {
        ridged[(i, i)] += floor;
    }
    if let Ok(l) = linalg::cholesky_lower(ridged) {
        return Ok(l);
    }
    let clipped = psd_truncate(k, floor)?;
    linalg::cholesky_lower(clipped.into_values())
        .map_err(|_| Error::Numerical("covariance estimate could not be regularized; raise the psd floor".into()))
}

/// Diagonal sums divided by `p` rather than by the number of entries on
/// each diagonal. Each residual contributes its biased autocovariance, which
/// is a PSD Toeplitz matrix, so unlike the plain diagonal mean the result is
/// never indefinite.
fn tapered_toeplitz(k: &DMatrix<f64>) -> DMatrix<f64> {
    let p = k.nrows();
    let lag: Vec<f64> = (0..p)
        .map(|d| (0..p - d).map(|a| 0.5 * (k[(a, a + d)] + k[(a + d, a)])).sum::<f64>() / p as f64)
        .collect();
    DMatrix::from_fn(p, p, |a, b| lag[a.abs_diff(b)])
}

/// Factor of the matrix that weights the `omega` step.
fn weight_factor(k: &DMatrix<f64>, structure: CovStructure, floor_rel: f64) -> Result<DMatrix<f64>> {
    let w = match structure {
        CovStructure::Stationary => tapered_toeplitz(k),
        _ => k.clone(),
    };
    let floor = floor_rel * w.trace() / w.nrows() as f64;
    regularized_factor(&w, floor)
}

fn nll_from_parts(l: &DMatrix<f64>, kinv: &DMatrix<f64>, scatter: &DMatrix<f64>, pairs: usize) -> f64 {
    let p = l.nrows();
    let logdet: f64 = 2.0 * (0..p).map(|d| l[(d, d)].ln()).sum::<f64>();
    let pairs = pairs as f64;
    0.5 * pairs * (p as f64 * (2.0 * std::f64::consts::PI).ln() + logdet) + 0.5 * kinv.dot(scatter)
}

/// Negative log-likelihood of the residuals `e_k - omega e_{k-1}`,
/// `k = 2..i`, under `N(0, K)`. `K` must be positive definite.
pub fn reduced_nll(stats: &LagStats, omega: f64, k: &DMatrix<f64>) -> Result<f64> {
    let l = linalg::cholesky_lower(k.clone())
        .map_err(|_| Error::Numerical("likelihood needs a positive-definite kernel".into()))?;
    let kinv = linalg::cholesky_inverse(&l);
    Ok(nll_from_parts(&l, &kinv, &stats.residual_scatter(omega), stats.pairs))
}

/// Stage 1 on dimension `j` of `history`.
pub fn estimate_stage1(history: &ErrorHistory, j: usize, warm: Option<(f64, &DMatrix<f64>)>) -> Result<Stage1Estimate> {
    if j >= history.n() {
        return shape_err(format!("dimension {j} out of range for n = {}", history.n()));
    }
    let stats = LagStats::from_blocks(&history.dimension(j))?;
    estimate_stage1_with(&stats, warm, &Stage1Options::default())
}

/// Stage 1 from precomputed lag statistics.
pub fn estimate_stage1_with(
    stats: &LagStats,
    warm: Option<(f64, &DMatrix<f64>)>,
    opts: &Stage1Options,
) -> Result<Stage1Estimate> {
    let (p, pairs) = (stats.p, stats.pairs);
    if pairs == 0 {
        return Err(Error::InsufficientData("stage 1 needs at least two blocks".into()));
    }
    if let Some((_, k)) = warm {
        if k.nrows() != p || k.ncols() != p {
            return shape_err("warm-start kernel does not match p");
        }
    }
    let structure = opts.structure.resolve(pairs, p);
    let clip = |w: f64| w.clamp(-opts.omega_max, opts.omega_max);
    let scale = stats.s11.trace().max(stats.s00.trace()) / pairs as f64;

    let mut omega = match warm {
        // Resume the alternation: one omega step against the previous
        // covariance, now seeing the new data.
        Some((w, k)) if k.trace() > 0.0 => {
            let l = weight_factor(k, structure, opts.floor_rel)?;
            let kinv = linalg::cholesky_inverse(&l);
            omega_ratio(&kinv, &stats.s10, &stats.s00).map_or(clip(w), clip)
        }
        Some((w, _)) => clip(w),
        None => {
            let den = stats.s00.trace();
            if den > 0.0 {
                clip(stats.s10.trace() / den)
            } else {
                0.0
            }
        }
    };
    let mut prev_k = warm.map(|(_, k)| k.clone());
    let mut objective_trace = Vec::new();
    let mut k_tilde = DMatrix::zeros(p, p);
    let mut converged = false;
    let mut alternations = 0;

    while alternations < opts.max_alternations {
        alternations += 1;
        let scatter = stats.residual_scatter(omega);
        let k = &scatter / pairs as f64;
        if !(k.trace() > 1e-12 * scale) {
            // Residuals vanish: the data are exactly self-similar.
            k_tilde = DMatrix::zeros(p, p);
            converged = true;
            break;
        }
        let l = weight_factor(&k, structure, opts.floor_rel)?;
        let kinv = linalg::cholesky_inverse(&l);
        objective_trace.push(nll_from_parts(&l, &kinv, &scatter, pairs));

        let next = omega_ratio(&kinv, &stats.s10, &stats.s00).map_or(omega, clip);
        let d_omega = (next - omega).abs() / next.abs().max(omega.abs()).max(1e-3);
        let d_k = match &prev_k {
            Some(pk) => (&k - pk).norm() / k.norm(),
            None => f64::INFINITY,
        };
        omega = next;
        prev_k = Some(k.clone());
        k_tilde = k;
        if d_omega < opts.tol && d_k < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(Stage1Estimate { omega, k_tilde, alternations, objective_trace, converged, structure })
}

/// Stage 2: diagonal averaging then eigenvalue clipping at the default floor.
pub fn estimate_stage2(k_tilde: &DMatrix<f64>) -> Result<CovKernel> {
    let projected = toeplitz_project(k_tilde)?;
    let floor = default_floor(&projected);
    psd_truncate(&projected, floor)
}

/// How the final kernel is represented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelMode {
    /// Use the stage-2 matrix as is.
    #[default]
    General,
    /// Replace it with the nearest member of a parametric family.
    Parametric { kind: KernelKind },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EstimatorOptions {
    pub stage1: Stage1Options,
    pub kernel_mode: KernelMode,
    pub fit: FitOptions,
}

fn finish_kernel(k_tilde: &DMatrix<f64>, opts: &EstimatorOptions) -> Result<CovKernel> {
    match opts.kernel_mode {
        KernelMode::General => estimate_stage2(k_tilde),
        KernelMode::Parametric { kind } => {
            let fit = frobenius_fit(k_tilde, kind, &opts.fit)?;
            let built = build_cov_matrix(&fit.family, k_tilde.nrows())?;
            let floor = default_floor(built.values());
            psd_truncate(built.values(), floor)
        }
    }
}

/// One-shot estimate of every dimension from a full history, warm-started
/// from `previous` when given.
pub fn update_estimates(
    history: &ErrorHistory,
    previous: Option<&QpgpModel>,
    kernel_mode: KernelMode,
) -> Result<QpgpModel> {
    if let Some(prev) = previous {
        if prev.n() != history.n() || prev.p() != history.p() {
            return shape_err("previous model does not match the history's (n, p)");
        }
    }
    let opts = EstimatorOptions { kernel_mode, ..Default::default() };
    let mut omega = Vec::with_capacity(history.n());
    let mut kernels = Vec::with_capacity(history.n());
    for j in 0..history.n() {
        let stats = LagStats::from_blocks(&history.dimension(j))?;
        let warm = previous.map(|m| (m.omega()[j], m.kernel(j).values()));
        let s1 = estimate_stage1_with(&stats, warm, &opts.stage1)?;
        kernels.push(finish_kernel(&s1.k_tilde, &opts)?);
        omega.push(s1.omega);
    }
    QpgpModel::new(omega, kernels)
}

/// Incremental estimator for use inside the control loop: blocks are folded
/// into lag statistics as they arrive and each re-estimate starts from the
/// previous stage-1 solution.
#[derive(Clone, Debug)]
pub struct QpgpEstimator {
    options: EstimatorOptions,
    n: usize,
    stats: Vec<LagStats>,
    warm: Vec<Option<(f64, DMatrix<f64>)>>,
    model: Option<QpgpModel>,
    last_alternations: Vec<usize>,
}

impl QpgpEstimator {
    pub fn new(n: usize, p: usize, options: EstimatorOptions) -> Self {
        Self {
            options,
            n,
            stats: (0..n).map(|_| LagStats::new(p)).collect(),
            warm: vec![None; n],
            model: None,
            last_alternations: vec![0; n],
        }
    }

    pub fn push(&mut self, e: &ErrorTrajectory) -> Result<()> {
        if e.n() != self.n || e.p() != self.stats[0].p() {
            return shape_err("block does not match the estimator's (n, p)");
        }
        for (j, s) in self.stats.iter_mut().enumerate() {
            s.push(e.block(j))?;
        }
        Ok(())
    }

    /// True once two blocks have been seen.
    pub fn ready(&self) -> bool {
        self.stats[0].pairs() >= 1
    }

    pub fn estimate(&mut self) -> Result<&QpgpModel> {
        let mut omega = Vec::with_capacity(self.n);
        let mut kernels = Vec::with_capacity(self.n);
        for j in 0..self.n {
            let warm = self.warm[j].as_ref().map(|(w, k)| (*w, k));
            let s1 = estimate_stage1_with(&self.stats[j], warm, &self.options.stage1)?;
            kernels.push(finish_kernel(&s1.k_tilde, &self.options)?);
            omega.push(s1.omega);
            self.last_alternations[j] = s1.alternations;
            self.warm[j] = Some((s1.omega, s1.k_tilde));
        }
        self.model = Some(QpgpModel::new(omega, kernels)?);
        Ok(self.model.as_ref().expect("just set"))
    }

    pub fn model(&self) -> Option<&QpgpModel> {
        self.model.as_ref()
    }

    pub fn last_alternations(&self) -> &[usize] {
        &self.last_alternations
    }

    pub fn stats(&self, j: usize) -> &LagStats {
        &self.stats[j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{build_cov_matrix, KernelFamily};
    use crate::qpgp::sample_trajectory;

    fn periodic(p: usize) -> CovKernel {
        build_cov_matrix(&KernelFamily::Periodic { variance: 1.0, lengthscale: 1.0, period: p as f64 / 2.0 }, p)
            .unwrap()
    }

    #[test]
    fn scatter_matches_direct_sum() {
        let blocks: Vec<DVector<f64>> =
            (0..4).map(|k| DVector::from_fn(3, |i, _| ((k * 3 + i) as f64).sin())).collect();
        let stats = LagStats::from_blocks(&blocks).unwrap();
        let w = 0.37;
        let mut direct = DMatrix::zeros(3, 3);
        for k in 1..4 {
            let r = &blocks[k] - &blocks[k - 1] * w;
            direct += &r * r.transpose();
        }
        assert!((stats.residual_scatter(w) - direct).amax() < 1e-13);
        assert_eq!(stats.pairs(), 3);
    }

    #[test]
    fn self_similar_data() {
        let e1: Vec<f64> = vec![1.0, -0.5, 2.0, 0.25];
        let blocks: Vec<ErrorTrajectory> = (0..6)
            .map(|k| ErrorTrajectory::from_blocks(&[e1.iter().map(|v| v * 0.5f64.powi(k)).collect()]).unwrap())
            .collect();
        let h = ErrorHistory::new(blocks).unwrap();
        let est = estimate_stage1(&h, 0, None).unwrap();
        assert!((est.omega - 0.5).abs() < 1e-12);
        assert!(est.k_tilde.amax() < 1e-12);
        assert!(est.converged);
    }

    #[test]
    fn identity_kernel_omega_is_regression() {
        let e1 = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let e2 = DVector::from_vec(vec![0.5, -1.0, 3.0]);
        let stats = LagStats::from_blocks(&[e1.clone(), e2.clone()]).unwrap();
        let w = stats.omega_given_kernel(&DMatrix::identity(3, 3)).unwrap().unwrap();
        assert!((w - e1.dot(&e2) / e1.dot(&e1)).abs() < 1e-15);
    }

    #[test]
    fn identical_blocks_clip_omega() {
        let b = ErrorTrajectory::from_blocks(&[vec![0.3, -0.7, 1.2, 0.1, 0.5]]).unwrap();
        let h = ErrorHistory::new(vec![b.clone(), b]).unwrap();
        let model = update_estimates(&h, None, KernelMode::General).unwrap();
        assert_eq!(model.omega()[0], 0.999);
        assert!(model.kernel(0).values().amax() < 1e-5);
    }

    #[test]
    fn needs_two_blocks() {
        let h = ErrorHistory::single(ErrorTrajectory::zeros(1, 3));
        assert!(matches!(estimate_stage1(&h, 0, None), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn objective_is_non_increasing() {
        let p = 6;
        // A nugget keeps the true kernel full rank; with a singular kernel
        // the likelihood is dominated by the ridge.
        let k = CovKernel::new(periodic(p).values() + DMatrix::identity(p, p) * 0.1).unwrap();
        let model = QpgpModel::uniform(1, 0.6, k).unwrap();
        for seed in 0..5 {
            let h = sample_trajectory(&model, 40, seed).unwrap();
            let stats = LagStats::from_blocks(&h.dimension(0)).unwrap();
            let opts = Stage1Options { structure: CovStructure::Unconstrained, ..Default::default() };
            let est = estimate_stage1_with(&stats, Some((-0.5, &DMatrix::identity(p, p))), &opts).unwrap();
            assert!(est.objective_trace.len() >= 2);
            for w in est.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "{:?}", est.objective_trace);
            }
        }
    }

    #[test]
    fn stage2_fixed_point_and_psd() {
        let k = periodic(7);
        let out = estimate_stage2(k.values()).unwrap();
        assert!((out.values() - k.values()).amax() < 1e-10);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let fixed = estimate_stage2(&bad).unwrap();
        assert!(crate::linalg::min_eigenvalue(fixed.values()) >= 0.0);
    }

    #[test]
    fn incremental_matches_batch() {
        let p = 5;
        let model = QpgpModel::uniform(2, 0.4, periodic(p)).unwrap();
        let h = sample_trajectory(&model, 12, 9).unwrap();
        let mut est = QpgpEstimator::new(2, p, EstimatorOptions::default());
        for b in h.blocks() {
            est.push(b).unwrap();
        }
        let inc = est.estimate().unwrap().clone();
        let batch = update_estimates(&h, None, KernelMode::General).unwrap();
        for j in 0..2 {
            assert!((inc.omega()[j] - batch.omega()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn parametric_mode_returns_family_kernel() {
        let p = 8;
        let model = QpgpModel::uniform(1, 0.5, periodic(p)).unwrap();
        let h = sample_trajectory(&model, 60, 2).unwrap();
        let fitted = update_estimates(&h, None, KernelMode::Parametric { kind: KernelKind::Periodic }).unwrap();
        assert!(fitted.kernel(0).is_stationary());
        assert!(update_estimates(&h, None, KernelMode::Parametric { kind: KernelKind::General }).is_err());
    }
}
