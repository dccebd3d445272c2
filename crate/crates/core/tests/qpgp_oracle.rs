//! The QPGP predictors against dense Gaussian conditioning, plus estimator
//! consistency checks on synthetic data.

use nalgebra::{DMatrix, DVector};
use qpgp_ilc::kernels::{build_cov_matrix, CovKernel, KernelFamily};
use qpgp_ilc::qpgp::{
    block_predict, brute_force_conditional_mean, element_predict, estimate_stage1, estimate_stage2,
    sample_trajectory, update_estimates, ErrorHistory, KernelMode, QpgpModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stacked covariance built by propagating the recursion block by block
/// (Cov(x_{k+1}, x_l) = omega Cov(x_k, x_l) for k >= l) rather than from the
/// closed-form power, then conditioned with an LU solve.
fn independent_conditional_mean(w: f64, k: &DMatrix<f64>, obs: &[f64], blocks: usize) -> DVector<f64> {
    let p = k.nrows();
    let total = blocks * p;
    let mut cov = DMatrix::zeros(total, total);
    let stat = k / (1.0 - w * w);
    for a in 0..blocks {
        // Diagonal blocks are all the stationary covariance.
        cov.view_mut((a * p, a * p), (p, p)).copy_from(&stat);
        for b in (0..a).rev() {
            let above = cov.view(((b + 1) * p, a * p), (p, p)).clone_owned();
            let lower = &above * w;
            cov.view_mut((b * p, a * p), (p, p)).copy_from(&lower);
            cov.view_mut((a * p, b * p), (p, p)).copy_from(&lower.transpose());
        }
    }
    let n_obs = obs.len();
    let s_oo = cov.view((0, 0), (n_obs, n_obs)).clone_owned();
    let s_ro = cov.view((n_obs, 0), (total - n_obs, n_obs)).clone_owned();
    let inv = s_oo.lu().try_inverse().expect("observed covariance invertible");
    s_ro * inv * DVector::from_column_slice(obs)
}

fn random_kernel(p: usize, rng: &mut ChaCha8Rng) -> CovKernel {
    let variance = rng.random_range(0.3..2.0);
    let lengthscale = rng.random_range(0.4..2.0);
    let base = if rng.random_bool(0.5) {
        build_cov_matrix(&KernelFamily::Periodic { variance, lengthscale, period: rng.random_range(2.0..p as f64) }, p)
    } else {
        build_cov_matrix(&KernelFamily::Rbf { variance, lengthscale }, p)
    }
    .unwrap();
    CovKernel::new(base.values() + DMatrix::identity(p, p) * rng.random_range(0.05..0.3)).unwrap()
}

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

#[test]
fn oracle_agrees_with_independent_partitioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..10 {
        let p = [3usize, 5][case % 2];
        let k = random_kernel(p, &mut rng);
        let w = rng.random_range(-0.9..0.9);
        let model = QpgpModel::uniform(1, w, k.clone()).unwrap();
        let full = sample_trajectory(&model, 4, case as u64).unwrap();
        let history = full.prefix(3).unwrap();
        let next = full.blocks()[3].block(0).into_owned();
        for cut in [0, 1, p - 1] {
            let ours = brute_force_conditional_mean(&model, &history, &next.as_slice()[..cut], 0).unwrap();
            let mut obs: Vec<f64> = history.blocks().iter().flat_map(|b| b.block(0).iter().copied().collect::<Vec<_>>()).collect();
            obs.extend_from_slice(&next.as_slice()[..cut]);
            let theirs = independent_conditional_mean(w, k.values(), &obs, 4);
            assert!(rel_err(&ours, &theirs) < 1e-9, "case {case} cut {cut}");
        }
    }
}

#[test]
fn predictors_match_oracle_over_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..20 {
        let p = [4usize, 8][case % 2];
        let i = [3usize, 5][(case / 2) % 2];
        let model = QpgpModel::new(
            vec![rng.random_range(-0.95..0.95), rng.random_range(-0.95..0.95)],
            vec![random_kernel(p, &mut rng), random_kernel(p, &mut rng)],
        )
        .unwrap();
        let full = sample_trajectory(&model, i + 1, 100 + case as u64).unwrap();
        let history = full.prefix(i).unwrap();
        let next = &full.blocks()[i];
        let block = block_predict(&model, history.last()).unwrap();
        for j in 0..2 {
            let oracle = brute_force_conditional_mean(&model, &history, &[], j).unwrap();
            assert!(rel_err(&block.block(j).into_owned(), &oracle) < 1e-8, "case {case} dim {j}");
            let truth = next.block(j);
            for t in 1..=p {
                let prefix = &truth.as_slice()[..t - 1];
                let ours = element_predict(&model, history.last(), prefix, j, t).unwrap();
                let oracle = brute_force_conditional_mean(&model, &history, prefix, j).unwrap()[0];
                assert!((ours - oracle).abs() <= 1e-8 * oracle.abs().max(1e-3), "case {case} t {t}: {ours} vs {oracle}");
            }
        }
    }
}

#[test]
fn only_the_last_block_matters() {
    let p = 5;
    let k = build_cov_matrix(&KernelFamily::Periodic { variance: 1.0, lengthscale: 0.8, period: 5.0 }, p).unwrap();
    let k = CovKernel::new(k.values() + DMatrix::identity(p, p) * 0.1).unwrap();
    let model = QpgpModel::uniform(1, 0.75, k).unwrap();
    let full = sample_trajectory(&model, 6, 3).unwrap();
    let last_only = ErrorHistory::single(full.last().clone());
    let prefix = [0.2, -0.1];
    let a = brute_force_conditional_mean(&model, &full, &prefix, 0).unwrap();
    let b = brute_force_conditional_mean(&model, &last_only, &prefix, 0).unwrap();
    assert!(rel_err(&a, &b) < 1e-9);
}

#[test]
fn omega_zero_history_gives_zero_forecast() {
    let model = QpgpModel::uniform(1, 0.0, CovKernel::identity(4)).unwrap();
    let h = sample_trajectory(&model, 3, 1).unwrap();
    assert_eq!(brute_force_conditional_mean(&model, &h, &[], 0).unwrap().norm(), 0.0);
}

#[test]
fn sample_covariance_is_stationary() {
    let p = 4;
    let k = build_cov_matrix(&KernelFamily::Rbf { variance: 1.0, lengthscale: 1.5 }, p).unwrap();
    let w = 0.5;
    let model = QpgpModel::uniform(1, w, k.clone()).unwrap();
    let h = sample_trajectory(&model, 5000, 8).unwrap();
    let mut cov = DMatrix::zeros(p, p);
    for b in h.blocks() {
        let v = b.block(0);
        cov += &v * v.transpose();
    }
    cov /= h.len() as f64;
    let target = k.values() / (1.0 - w * w);
    assert!((cov - &target).norm() < 0.1 * target.norm());
}

#[test]
fn estimator_recovers_omega_and_kernel() {
    let p = 10;
    let truth = build_cov_matrix(&KernelFamily::Periodic { variance: 1.0, lengthscale: 1.0, period: 5.0 }, p).unwrap();
    let truth = CovKernel::new(truth.values() + DMatrix::identity(p, p) * 0.05).unwrap();
    let model = QpgpModel::uniform(1, 0.8, truth.clone()).unwrap();
    let mut total = 0.0;
    for seed in 0..10 {
        let h = sample_trajectory(&model, 300, seed).unwrap();
        let est = estimate_stage1(&h, 0, None).unwrap();
        total += (est.omega - 0.8).abs();
        let k = estimate_stage2(&est.k_tilde).unwrap();
        assert!((k.values() - truth.values()).norm() < 0.2 * truth.values().norm());
    }
    assert!(total / 10.0 < 0.05);
}

#[test]
fn null_model_gives_small_omega() {
    let p = 6;
    let model = QpgpModel::uniform(1, 0.0, CovKernel::identity(p)).unwrap();
    for seed in 0..5 {
        let h = sample_trajectory(&model, 200, seed).unwrap();
        let m = update_estimates(&h, None, KernelMode::General).unwrap();
        assert!(m.omega()[0].abs() < 0.1, "seed {seed}: {}", m.omega()[0]);
    }
}

#[test]
fn stage2_on_iid_sample_covariance() {
    let p = 12;
    let truth = build_cov_matrix(&KernelFamily::Periodic { variance: 1.0, lengthscale: 0.9, period: 6.0 }, p).unwrap();
    let model = QpgpModel::uniform(1, 0.0, truth.clone()).unwrap();
    let h = sample_trajectory(&model, 500, 4).unwrap();
    let mut cov = DMatrix::zeros(p, p);
    for b in h.blocks() {
        let v = b.block(0);
        cov += &v * v.transpose();
    }
    cov /= 500.0;
    let k = estimate_stage2(&cov).unwrap();
    assert!((k.values() - truth.values()).norm() < 0.15 * truth.values().norm());
}

#[test]
fn warm_start_saves_alternations() {
    let p = 8;
    let truth = build_cov_matrix(&KernelFamily::Periodic { variance: 1.0, lengthscale: 1.0, period: 4.0 }, p).unwrap();
    let truth = CovKernel::new(truth.values() + DMatrix::identity(p, p) * 0.1).unwrap();
    let model = QpgpModel::uniform(1, 0.7, truth).unwrap();
    let (mut warm_steps, mut cold_steps) = (0usize, 0usize);
    for seed in 0..10 {
        let h = sample_trajectory(&model, 41, seed).unwrap();
        let before = h.prefix(40).unwrap();
        let prev = estimate_stage1(&before, 0, None).unwrap();
        let cold = estimate_stage1(&h, 0, None).unwrap();
        let warm = estimate_stage1(&h, 0, Some((prev.omega, &prev.k_tilde))).unwrap();
        assert!((warm.omega - cold.omega).abs() < 1e-6, "seed {seed}");
        assert!((&warm.k_tilde - &cold.k_tilde).amax() < 1e-6);
        warm_steps += warm.alternations;
        cold_steps += cold.alternations;
    }
    // The least-squares cold start is already close to the optimum and the
    // alternation converges linearly, so the saving is a few steps per call
    // rather than half of them.
    assert!(warm_steps < cold_steps, "warm {warm_steps} cold {cold_steps}");
}
