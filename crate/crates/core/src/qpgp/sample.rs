use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::trajectory::ErrorTrajectory;

use super::{ErrorHistory, QpgpModel};

/// Symmetric square root through the eigendecomposition, so semidefinite
/// (even zero) kernels are accepted.
fn sqrt_factor(k: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(k.clone());
    let mut q = eig.eigenvectors.clone();
    for (c, mut col) in q.column_iter_mut().enumerate() {
        col *= eig.eigenvalues[c].max(0.0).sqrt();
    }
    q
}

/// Draws `iterations` blocks from the model, starting from its stationary
/// distribution. Deterministic in `seed`.
pub fn sample_trajectory(model: &QpgpModel, iterations: usize, seed: u64) -> Result<ErrorHistory> {
    if iterations == 0 {
        return Err(Error::Parameter("need at least one iteration".into()));
    }
    let (n, p) = (model.n(), model.p());
    let factors: Vec<_> = model.kernels().iter().map(|k| sqrt_factor(k.values())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |f: &DMatrix<f64>| -> DVector<f64> {
        let z = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
        f * z
    };
    let mut blocks = Vec::with_capacity(iterations);
    let mut x = ErrorTrajectory::zeros(n, p);
    for j in 0..n {
        let w: f64 = model.omega()[j];
        let v = draw(&factors[j]) / (1.0 - w * w).sqrt();
        x.block_mut(j).copy_from(&v);
    }
    blocks.push(x);
    for _ in 1..iterations {
        let prev = blocks.last().expect("non-empty");
        let mut x = ErrorTrajectory::zeros(n, p);
        for j in 0..n {
            let v = prev.block(j) * model.omega()[j] + draw(&factors[j]);
            x.block_mut(j).copy_from(&v);
        }
        blocks.push(x);
    }
    ErrorHistory::new(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::CovKernel;

    #[test]
    fn zero_kernel_gives_zero_blocks() {
        let model = QpgpModel::uniform(2, 0.7, CovKernel::zeros(4)).unwrap();
        let h = sample_trajectory(&model, 5, 3).unwrap();
        assert!(h.blocks().iter().all(|b| b.norm() == 0.0));
    }

    #[test]
    fn deterministic_in_seed() {
        let model = QpgpModel::uniform(1, 0.3, CovKernel::identity(6)).unwrap();
        let a = sample_trajectory(&model, 4, 11).unwrap();
        let b = sample_trajectory(&model, 4, 11).unwrap();
        let c = sample_trajectory(&model, 4, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn lag_one_autocorrelation() {
        let model = QpgpModel::uniform(1, 0.8, CovKernel::identity(3)).unwrap();
        let h = sample_trajectory(&model, 2000, 5).unwrap();
        let b = h.blocks();
        let num: f64 = b.windows(2).map(|w| w[0].as_vector().dot(w[1].as_vector())).sum();
        let den: f64 = b[..b.len() - 1].iter().map(|x| x.as_vector().norm_squared()).sum();
        assert!((num / den - 0.8).abs() < 0.05, "{}", num / den);
    }
}
