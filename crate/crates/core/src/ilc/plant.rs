use nalgebra::DVector;

use crate::error::{shape_err, Result};
use crate::trajectory::ErrorTrajectory;

/// Supplies the feedforward input sample by sample during a rollout and is
/// shown each error sample as soon as it is measured.
pub trait InputPolicy {
    /// Writes the `m` input components for timestep `t` (0-based).
    fn input(&mut self, t: usize, out: &mut [f64]) -> Result<()>;
    /// Receives the `n` error components measured after applying input `t`.
    fn observe(&mut self, t: usize, error: &[f64]) -> Result<()>;
}

/// Plays back a precomputed lifted input.
#[derive(Clone, Debug)]
pub struct FixedInput {
    u: DVector<f64>,
    p: usize,
}

impl FixedInput {
    pub fn new(u: DVector<f64>, p: usize) -> Result<Self> {
        if p == 0 || u.len() % p != 0 {
            return shape_err(format!("input of length {} is not a whole number of {p}-sample blocks", u.len()));
        }
        Ok(Self { u, p })
    }
}

impl InputPolicy for FixedInput {
    fn input(&mut self, t: usize, out: &mut [f64]) -> Result<()> {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.u[k * self.p + t];
        }
        Ok(())
    }

    fn observe(&mut self, _t: usize, _error: &[f64]) -> Result<()> {
        Ok(())
    }
}

/// Outcome of one pass over the task.
#[derive(Clone, Debug)]
pub struct PlantRollout {
    /// Feedforward actually applied, lifted `m * p`.
    pub inputs: DVector<f64>,
    /// Measured outputs, lifted `n * p`.
    pub outputs: DVector<f64>,
    pub error: ErrorTrajectory,
    /// Executed planar path, one point per timestep, for plotting.
    pub path: Vec<[f64; 2]>,
}

/// A repeated task driven by a lifted feedforward input.
pub trait Plant: Send + Sync {
    fn name(&self) -> &str;
    /// Error dimension.
    fn n(&self) -> usize;
    /// Input dimension.
    fn m(&self) -> usize;
    fn p(&self) -> usize;
    /// Feedforward for the first iteration.
    fn initial_input(&self) -> DVector<f64>;
    /// Runs iteration `iteration` (1-based). All randomness derives from
    /// `(seed, iteration)`.
    fn rollout(&self, iteration: usize, seed: u64, policy: &mut dyn InputPolicy) -> Result<PlantRollout>;
    /// Maps an error-space correction at timestep `t` into input space,
    /// given the feedforward `u_t` at that timestep. Identity by default.
    fn direction(&self, _t: usize, _u_t: &[f64], signal: &[f64], out: &mut [f64]) {
        out.copy_from_slice(signal);
    }
    /// Symmetric bound on each feedforward component, when inputs past it
    /// have no further effect on the plant. The loop projects onto it.
    fn input_bound(&self) -> Option<f64> {
        None
    }
    /// Lifted input-to-output Jacobian at `u`, when known in closed form.
    fn lifted_jacobian(&self, _u: &DVector<f64>) -> Option<nalgebra::DMatrix<f64>> {
        None
    }
}

/// Applies [`Plant::direction`] sample by sample to a lifted signal.
pub fn apply_direction(plant: &dyn Plant, u: &DVector<f64>, signal: &DVector<f64>) -> Result<DVector<f64>> {
    let (n, m, p) = (plant.n(), plant.m(), plant.p());
    if u.len() != m * p || signal.len() != n * p {
        return shape_err("lifted input or signal does not match the plant");
    }
    let mut out = DVector::zeros(m * p);
    let mut u_t = vec![0.0; m];
    let mut s_t = vec![0.0; n];
    let mut d_t = vec![0.0; m];
    for t in 0..p {
        for k in 0..m {
            u_t[k] = u[k * p + t];
        }
        for j in 0..n {
            s_t[j] = signal[j * p + t];
        }
        plant.direction(t, &u_t, &s_t, &mut d_t);
        for k in 0..m {
            out[k * p + t] = d_t[k];
        }
    }
    Ok(out)
}
