use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use qpgp_ilc::gp_baseline::{fit_full_gp, fit_sparse_gp, GpDataset, GpKernel, GpPoint, SparseGp, SparseOptions};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KERNEL: GpKernel = GpKernel { variance: 1.0, iteration_lengthscale: 2.0, time_lengthscale: 3.0 };

fn synthetic(iterations: usize, p: usize, seed: u64) -> GpDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 1..=iterations {
        for t in 1..=p {
            x.push([i as f64, t as f64]);
            let s = t as f64 / p as f64;
            y.push((6.0 * s).sin() * 0.9f64.powi(i as i32) + 0.2 * (2.0 * s).cos() + 0.05 * rng.random_range(-1.0..1.0));
        }
    }
    GpDataset::new(x, y).unwrap()
}

fn textbook_mean(data: &GpDataset, kernel: &GpKernel, noise: f64, queries: &[GpPoint]) -> DVector<f64> {
    let x = data.inputs();
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |a, b| kernel.eval(x[a], x[b])) + DMatrix::identity(n, n) * noise;
    let ks = DMatrix::from_fn(queries.len(), n, |a, b| kernel.eval(queries[a], x[b]));
    let y = DVector::from_column_slice(data.targets());
    ks * k.lu().solve(&y).unwrap()
}

#[test]
fn full_gp_matches_textbook_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<GpPoint> = (0..50).map(|_| [rng.random_range(1.0..6.0), rng.random_range(1.0..20.0)]).collect();
    let y: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
    let data = GpDataset::new(x, y).unwrap();
    let queries: Vec<GpPoint> = (1..=20).map(|t| [7.0, t as f64]).collect();
    let gp = fit_full_gp(&data, KERNEL, 0.05).unwrap();
    let ours = gp.predict(&queries);
    let theirs = textbook_mean(&data, &KERNEL, 0.05, &queries);
    assert!((ours - &theirs).amax() < 1e-9 * theirs.amax().max(1.0));
}

#[test]
fn full_gp_permutation_invariant() {
    let data = synthetic(4, 15, 1);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let shuffled = GpDataset::new(
        idx.iter().map(|&i| data.inputs()[i]).collect(),
        idx.iter().map(|&i| data.targets()[i]).collect(),
    )
    .unwrap();
    let q: Vec<GpPoint> = (1..=15).map(|t| [5.0, t as f64]).collect();
    let a = fit_full_gp(&data, KERNEL, 0.01).unwrap().predict(&q);
    let b = fit_full_gp(&shuffled, KERNEL, 0.01).unwrap().predict(&q);
    assert!((a - b).amax() < 1e-10);
}

#[test]
fn sparse_with_every_point_inducing_matches_full() {
    let data = synthetic(2, 12, 4);
    let q: Vec<GpPoint> = (1..=12).map(|t| [3.0, t as f64]).collect();
    let full = fit_full_gp(&data, KERNEL, 0.05).unwrap().predict(&q);
    let sparse = SparseGp::with_inducing(&data, data.inputs().to_vec(), KERNEL, 0.05).unwrap().predict(&q);
    assert!((full - sparse).amax() < 1e-6);

    // k-means with M = N lands one center on each input.
    let fitted = fit_sparse_gp(&data, data.len(), KERNEL, 0.05, &SparseOptions::default(), None).unwrap();
    let full = fit_full_gp(&data, KERNEL, 0.05).unwrap().predict(&q);
    assert!((full - fitted.predict(&q)).amax() < 1e-6);
}

#[test]
fn sparse_clamps_oversized_inducing_set() {
    let data = synthetic(1, 5, 0);
    let gp = fit_sparse_gp(&data, 50, KERNEL, 0.05, &SparseOptions::default(), None).unwrap();
    assert_eq!(gp.inducing().len(), 5);
}

#[test]
fn sparse_error_shrinks_with_more_inducing_points() {
    let data = synthetic(6, 30, 2);
    let q: Vec<GpPoint> = (1..=30).map(|t| [7.0, t as f64]).collect();
    let full = fit_full_gp(&data, KERNEL, 0.01).unwrap().predict(&q);
    let mut last = f64::INFINITY;
    for m in [5, 20, 80, data.len()] {
        let gp = fit_sparse_gp(&data, m, KERNEL, 0.01, &SparseOptions::default(), None).unwrap();
        let err = (gp.predict(&q) - &full).norm();
        assert!(err <= last * (1.0 + 1e-9) + 1e-9, "M={m}: {err} after {last}");
        last = err;
    }
    assert!(last < 1e-6);
}

#[test]
fn sparse_is_cheaper_than_full() {
    let data = synthetic(20, 100, 5);
    let q: Vec<GpPoint> = (1..=100).map(|t| [21.0, t as f64]).collect();
    let start = Instant::now();
    let _ = fit_full_gp(&data, KERNEL, 0.01).unwrap().predict(&q);
    let full = start.elapsed();
    let start = Instant::now();
    let _ = fit_sparse_gp(&data, 100, KERNEL, 0.01, &SparseOptions::default(), None).unwrap().predict(&q);
    let sparse = start.elapsed();
    assert!(sparse < full, "sparse {sparse:?} full {full:?}");
}

#[test]
fn full_gp_cost_grows_superlinearly_in_iterations() {
    let p = 60;
    let mut points = Vec::new();
    for iterations in [8usize, 16, 32] {
        let data = synthetic(iterations, p, 7);
        let mut best = f64::INFINITY;
        for _ in 0..3 {
            let start = Instant::now();
            let _ = fit_full_gp(&data, KERNEL, 0.01).unwrap();
            best = best.min(start.elapsed().as_secs_f64());
        }
        points.push(((iterations as f64).ln(), best.ln()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!(slope > 1.5, "log-log slope {slope}");
}
