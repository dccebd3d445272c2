use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::ilc::{InputPolicy, Plant, PlantRollout};
use crate::kernels::CovKernel;
use crate::trajectory::ErrorTrajectory;

use super::iteration_rng;

/// `y_i = G u_i + d + z_i` with a causal lifted `G`, a repeating offset `d`
/// and optional noise `z_i ~ N(0, K)` per output dimension, drawn afresh
/// every iteration. The error is `r - y_i`.
#[derive(Clone, Debug)]
pub struct LinearPlant {
    g: DMatrix<f64>,
    reference: DVector<f64>,
    offset: DVector<f64>,
    noise_factor: Option<DMatrix<f64>>,
    n: usize,
    m: usize,
    p: usize,
}

impl LinearPlant {
    pub fn new(g: DMatrix<f64>, p: usize, reference: DVector<f64>, offset: DVector<f64>) -> Result<Self> {
        if p == 0 || g.nrows() % p != 0 || g.ncols() % p != 0 {
            return shape_err("G must be (n p) x (m p)");
        }
        let (n, m) = (g.nrows() / p, g.ncols() / p);
        if reference.len() != n * p || offset.len() != n * p {
            return shape_err("reference and offset must have length n p");
        }
        for r in 0..n * p {
            for c in 0..m * p {
                if c % p > r % p && g[(r, c)] != 0.0 {
                    return shape_err(format!("G is not causal: entry ({r}, {c}) reads a future input"));
                }
            }
        }
        Ok(Self { g, reference, offset, noise_factor: None, n, m, p })
    }

    /// Adds per-iteration noise with covariance `kernel` in every dimension.
    pub fn with_noise(mut self, kernel: &CovKernel) -> Result<Self> {
        if kernel.size() != self.p {
            return shape_err("noise kernel must be p x p");
        }
        let eig = SymmetricEigen::new(kernel.values().clone());
        let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        self.noise_factor = Some(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt));
        Ok(self)
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
}

impl Plant for LinearPlant {
    fn name(&self) -> &str {
        "linear"
    }

    fn n(&self) -> usize {
        self.n
    }

    fn m(&self) -> usize {
        self.m
    }

    fn p(&self) -> usize {
        self.p
    }

    fn initial_input(&self) -> DVector<f64> {
        DVector::zeros(self.m * self.p)
    }

    fn rollout(&self, iteration: usize, seed: u64, policy: &mut dyn InputPolicy) -> Result<PlantRollout> {
        let (n, m, p) = (self.n, self.m, self.p);
        let noise = match &self.noise_factor {
            Some(f) => {
                let mut rng = iteration_rng(seed, iteration);
                let mut z = DVector::zeros(n * p);
                for j in 0..n {
                    let xi = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
                    z.rows_mut(j * p, p).copy_from(&(f * xi));
                }
                z
            }
            None => DVector::zeros(n * p),
        };
        let mut u = DVector::zeros(m * p);
        let mut y = DVector::zeros(n * p);
        let mut error = ErrorTrajectory::zeros(n, p);
        let mut u_t = vec![0.0; m];
        let mut e_t = vec![0.0; n];
        for t in 0..p {
            policy.input(t, &mut u_t)?;
            for k in 0..m {
                u[k * p + t] = u_t[k];
            }
            for j in 0..n {
                let r = j * p + t;
                let mut acc = self.offset[r] + noise[r];
                for k in 0..m {
                    for s in 0..=t {
                        acc += self.g[(r, k * p + s)] * u[k * p + s];
                    }
                }
                if !acc.is_finite() {
                    return Err(Error::Aborted(format!("output became non-finite at step {}", t + 1)));
                }
                y[r] = acc;
                e_t[j] = self.reference[r] - acc;
                error.set(j, t, e_t[j]);
            }
            policy.observe(t, &e_t)?;
        }
        Ok(PlantRollout { inputs: u, outputs: y, error, path: Vec::new() })
    }

    fn lifted_jacobian(&self, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.g.clone())
    }
}
