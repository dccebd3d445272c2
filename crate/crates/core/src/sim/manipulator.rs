use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3x2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::ilc::{FixedInput, InputPolicy, Plant, PlantRollout};
use crate::trajectory::ErrorTrajectory;

use super::{iteration_rng, ReferencePath};

/// Damping used when routing Cartesian corrections into joint space.
pub const PINV_DAMPING: f64 = 1e-3;

/// Constant joint offsets switched on partway through one iteration and
/// kept for every later one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    pub iteration: usize,
    pub offsets: [f64; 3],
    /// Fraction of the injection iteration that runs undisturbed.
    #[serde(default = "half")]
    pub start_fraction: f64,
}

fn half() -> f64 {
    0.5
}

impl Default for Disturbance {
    fn default() -> Self {
        Self { iteration: 25, offsets: [0.1, -0.1, 0.05], start_fraction: 0.5 }
    }
}

impl Disturbance {
    fn first_step(&self, iteration: usize, p: usize) -> Option<usize> {
        use std::cmp::Ordering::*;
        match iteration.cmp(&self.iteration) {
            Less => None,
            Equal => Some(((self.start_fraction * p as f64).round() as usize).min(p)),
            Greater => Some(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManipConfig {
    pub links: [f64; 3],
    pub center: [f64; 2],
    pub radius: f64,
    /// Standard deviations of the per-step joint-bias noise.
    pub bias_noise_std: [f64; 3],
    /// Include the deterministic parts of the joint biases.
    pub deterministic_bias: bool,
    /// Not read from plant JSON; experiment configs carry it at top level.
    #[serde(skip)]
    pub disturbance: Option<Disturbance>,
}

impl Default for ManipConfig {
    fn default() -> Self {
        Self {
            links: [1.0, 1.0, 0.5],
            center: [1.5, 1.0],
            radius: 0.5,
            bias_noise_std: [0.1, 0.2, 0.1],
            deterministic_bias: true,
            disturbance: None,
        }
    }
}

impl ManipConfig {
    /// Exact kinematics: no biases, no noise, no disturbance.
    pub fn ideal() -> Self {
        Self { bias_noise_std: [0.0; 3], deterministic_bias: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.links.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
            return Err(Error::Config("link lengths must be positive".into()));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) || self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("reference circle must have a finite center and positive radius".into()));
        }
        if self.bias_noise_std.iter().any(|&s| !(s.is_finite() && s >= 0.0)) {
            return Err(Error::Config("bias noise deviations must be non-negative".into()));
        }
        if let Some(d) = &self.disturbance {
            if d.iteration < 1 || !(0.0..=1.0).contains(&d.start_fraction) || d.offsets.iter().any(|o| !o.is_finite()) {
                return Err(Error::Config("disturbance needs iteration >= 1, start_fraction in [0, 1] and finite offsets".into()));
            }
        }
        let [l1, l2, l3] = self.links;
        let (reach_max, reach_min) = (l1 + l2 + l3, (l1 - l2).abs() - l3);
        for k in 0..360 {
            let s = 2.0 * PI * k as f64 / 360.0;
            let r = (self.center[0] + self.radius * s.cos()).hypot(self.center[1] + self.radius * s.sin());
            if r > reach_max || r < reach_min {
                return Err(Error::Config(format!("reference point at distance {r:.4} is out of reach")));
            }
        }
        Ok(())
    }

    /// Deterministic plus noisy joint biases at normalized time `s`.
    fn bias(&self, s: f64, noise: [f64; 3]) -> [f64; 3] {
        let det = if self.deterministic_bias {
            [
                0.2 + 0.5 * (8.0 * PI * s).sin(),
                -0.25 + 0.1 * (6.0 * PI * s).cos(),
                0.35 + 0.5 * (-(s - 0.04).powi(2) / (2.0 * 0.05 * 0.05)).exp(),
            ]
        } else {
            [0.0; 3]
        };
        [det[0] + noise[0], det[1] + noise[1], det[2] + noise[2]]
    }
}

/// Base, elbow, wrist and end-effector positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManipPose {
    pub joints: [[f64; 2]; 4],
}

impl ManipPose {
    pub fn end_effector(&self) -> [f64; 2] {
        self.joints[3]
    }
}

pub fn manip_fk(theta: [f64; 3], links: [f64; 3]) -> ManipPose {
    let mut joints = [[0.0; 2]; 4];
    let mut angle = 0.0;
    for k in 0..3 {
        angle += theta[k];
        joints[k + 1] = [joints[k][0] + links[k] * angle.cos(), joints[k][1] + links[k] * angle.sin()];
    }
    ManipPose { joints }
}

/// `d(x, y) / d theta` of the end effector.
pub fn manip_jacobian(theta: [f64; 3], links: [f64; 3]) -> Matrix2x3<f64> {
    let phi = [theta[0], theta[0] + theta[1], theta[0] + theta[1] + theta[2]];
    let mut j = Matrix2x3::zeros();
    for col in 0..3 {
        for s in col..3 {
            j[(0, col)] -= links[s] * phi[s].sin();
            j[(1, col)] += links[s] * phi[s].cos();
        }
    }
    j
}

/// Elbow-up solution with the last link held horizontal, so the wrist sits
/// `l3` to the left of the target.
pub fn manip_ik(x: f64, y: f64, links: [f64; 3]) -> Result<[f64; 3]> {
    let [l1, l2, l3] = links;
    let (xe, ye) = (x - l3, y);
    let mut d = (xe * xe + ye * ye - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
    if d.abs() > 1.0 + 1e-9 {
        return Err(Error::Unreachable(format!("({x}, {y}) gives cos(theta2) = {d}")));
    }
    d = d.clamp(-1.0, 1.0);
    let t2 = (1.0 - d * d).sqrt().atan2(d);
    let t1 = ye.atan2(xe) - (l2 * t2.sin()).atan2(l1 + l2 * t2.cos());
    Ok([t1, t2, -(t1 + t2)])
}

/// `J^T (J J^T + lambda^2 I)^-1`.
pub fn damped_pinv(j: &Matrix2x3<f64>, lambda: f64) -> Matrix3x2<f64> {
    let jjt = j * j.transpose() + Matrix2::identity() * (lambda * lambda);
    let inv = jjt.try_inverse().unwrap_or_else(Matrix2::zeros);
    j.transpose() * inv
}

/// Circle `(cx + r cos s, cy + r sin s)` at `s_j = 2 pi j / p`, `j = 0..p-1`.
pub fn gen_circle_ref(p: usize, center: [f64; 2], radius: f64) -> Result<ReferencePath> {
    if p < 3 {
        return param_err(format!("p must be at least 3, got {p}"));
    }
    let s: Vec<f64> = (0..p).map(|j| 2.0 * PI * j as f64 / p as f64).collect();
    let points = s.iter().map(|&s| [center[0] + radius * s.cos(), center[1] + radius * s.sin()]).collect();
    ReferencePath::new(points, s, true)
}

/// One pass along the reference. Actual joint angles are the feedforward
/// plus joint biases (and the disturbance once active); the error is the
/// Cartesian reference minus the end-effector position.
pub fn manip_rollout(
    config: &ManipConfig,
    reference: &ReferencePath,
    policy: &mut dyn InputPolicy,
    seed: u64,
    iteration: usize,
) -> Result<PlantRollout> {
    let p = reference.len();
    let mut rng = iteration_rng(seed, iteration);
    let normals: Vec<Normal<f64>> = config
        .bias_noise_std
        .iter()
        .map(|&s| Normal::new(0.0, s).map_err(|e| Error::Parameter(e.to_string())))
        .collect::<Result<_>>()?;
    let disturb_from = config.disturbance.as_ref().and_then(|d| d.first_step(iteration, p));
    let mut inputs = DVector::zeros(3 * p);
    let mut outputs = DVector::zeros(2 * p);
    let mut error = ErrorTrajectory::zeros(2, p);
    let mut path = Vec::with_capacity(p);
    let mut ff = [0.0; 3];
    for t in 0..p {
        policy.input(t, &mut ff)?;
        let s = if p > 1 { t as f64 / (p - 1) as f64 } else { 0.0 };
        let mut noise = [0.0; 3];
        for (k, n) in noise.iter_mut().enumerate() {
            if config.bias_noise_std[k] > 0.0 {
                *n = normals[k].sample(&mut rng);
            }
        }
        let b = config.bias(s, noise);
        let mut theta = [ff[0] + b[0], ff[1] + b[1], ff[2] + b[2]];
        if let (Some(from), Some(d)) = (disturb_from, &config.disturbance) {
            if t >= from {
                for k in 0..3 {
                    theta[k] += d.offsets[k];
                }
            }
        }
        let ee = manip_fk(theta, config.links).end_effector();
        if !(ee[0].is_finite() && ee[1].is_finite()) {
            return Err(Error::Aborted(format!("end effector became non-finite at step {}", t + 1)));
        }
        let r = reference.points[t];
        let e = [r[0] - ee[0], r[1] - ee[1]];
        for k in 0..3 {
            inputs[k * p + t] = ff[k];
        }
        outputs[t] = ee[0];
        outputs[p + t] = ee[1];
        error.set(0, t, e[0]);
        error.set(1, t, e[1]);
        path.push(ee);
        policy.observe(t, &e)?;
    }
    Ok(PlantRollout { inputs, outputs, error, path })
}

/// The arm as a repeated task: feedforward joint angles in, Cartesian
/// tracking error out.
#[derive(Clone, Debug)]
pub struct ManipPlant {
    config: ManipConfig,
    reference: ReferencePath,
    initial: DVector<f64>,
}

impl ManipPlant {
    pub fn new(config: ManipConfig, p: usize) -> Result<Self> {
        config.validate()?;
        let reference = gen_circle_ref(p, config.center, config.radius)?;
        let mut initial = DVector::zeros(3 * p);
        for (t, pt) in reference.points.iter().enumerate() {
            let th = manip_ik(pt[0], pt[1], config.links)?;
            for k in 0..3 {
                initial[k * p + t] = th[k];
            }
        }
        Ok(Self { config, reference, initial })
    }

    pub fn reference(&self) -> &ReferencePath {
        &self.reference
    }

    pub fn config(&self) -> &ManipConfig {
        &self.config
    }

    pub fn run(&self, ff: &DVector<f64>, iteration: usize, seed: u64) -> Result<PlantRollout> {
        self.rollout(iteration, seed, &mut FixedInput::new(ff.clone(), self.reference.len())?)
    }
}

impl Plant for ManipPlant {
    fn name(&self) -> &str {
        "manipulator"
    }

    fn n(&self) -> usize {
        2
    }

    fn m(&self) -> usize {
        3
    }

    fn p(&self) -> usize {
        self.reference.len()
    }

    fn initial_input(&self) -> DVector<f64> {
        self.initial.clone()
    }

    fn rollout(&self, iteration: usize, seed: u64, policy: &mut dyn InputPolicy) -> Result<PlantRollout> {
        manip_rollout(&self.config, &self.reference, policy, seed, iteration)
    }

    fn direction(&self, _t: usize, u_t: &[f64], signal: &[f64], out: &mut [f64]) {
        let j = manip_jacobian([u_t[0], u_t[1], u_t[2]], self.config.links);
        let d = damped_pinv(&j, PINV_DAMPING) * nalgebra::Vector2::new(signal[0], signal[1]);
        out.copy_from_slice(d.as_slice());
    }

    /// Block-diagonal per-timestep Jacobians; the biases shift the operating
    /// point, which is ignored here.
    fn lifted_jacobian(&self, u: &DVector<f64>) -> Option<DMatrix<f64>> {
        let p = self.p();
        let mut g = DMatrix::zeros(2 * p, 3 * p);
        for t in 0..p {
            let j = manip_jacobian([u[t], u[p + t], u[2 * p + t]], self.config.links);
            for r in 0..2 {
                for c in 0..3 {
                    g[(r * p + t, c * p + t)] = j[(r, c)];
                }
            }
        }
        Some(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINKS: [f64; 3] = [1.0, 1.0, 0.5];

    fn close(a: [f64; 2], b: [f64; 2], tol: f64) -> bool {
        (a[0] - b[0]).abs() < tol && (a[1] - b[1]).abs() < tol
    }

    #[test]
    fn fk_examples() {
        assert!(close(manip_fk([0.0; 3], LINKS).end_effector(), [2.5, 0.0], 1e-15));
        assert!(close(manip_fk([PI / 2.0, 0.0, 0.0], LINKS).end_effector(), [0.0, 2.5], 1e-15));
        assert!(close(manip_fk([PI / 2.0, -PI / 2.0, 0.0], LINKS).end_effector(), [1.5, 1.0], 1e-15));
    }

    #[test]
    fn jacobian_at_zero_and_periodic() {
        let j = manip_jacobian([0.0; 3], LINKS);
        assert_eq!(j, Matrix2x3::new(0.0, 0.0, 0.0, 2.5, 1.5, 0.5));
        let th = [0.3, -1.1, 0.7];
        let shifted = [th[0] + 2.0 * PI, th[1] + 2.0 * PI, th[2] + 2.0 * PI];
        assert!((manip_jacobian(th, LINKS) - manip_jacobian(shifted, LINKS)).amax() < 1e-12);
    }

    #[test]
    fn ik_examples() {
        let th = manip_ik(2.5, 0.0, LINKS).unwrap();
        assert!(th.iter().all(|v| v.abs() < 1e-7));
        let th = manip_ik(2.0, 1.0, LINKS).unwrap();
        assert!((0.0..=PI).contains(&th[1]));
        assert!(close(manip_fk(th, LINKS).end_effector(), [2.0, 1.0], 1e-9));
        assert!(matches!(manip_ik(5.0, 0.0, LINKS), Err(Error::Unreachable(_))));
    }

    #[test]
    fn circle_examples() {
        let c = gen_circle_ref(40, [1.5, 1.0], 0.5).unwrap();
        assert_eq!(c.points[0], [2.0, 1.0]);
        let max = c.points.iter().map(|q| q[0].hypot(q[1])).fold(0.0, f64::max);
        assert!(max < 2.5);
        ManipConfig::default().validate().unwrap();
    }

    #[test]
    fn rollout_contracts() {
        let exact = ManipPlant::new(ManipConfig::ideal(), 50).unwrap();
        let r = exact.run(&exact.initial_input(), 1, 0).unwrap();
        assert!(r.error.max_norm() < 1e-9);
        let nominal = ManipPlant::new(ManipConfig::default(), 50).unwrap();
        let a = nominal.run(&nominal.initial_input(), 1, 2).unwrap();
        let b = nominal.run(&nominal.initial_input(), 1, 2).unwrap();
        assert!(a.error.norm() > 0.0);
        assert_eq!(a.error, b.error);
    }

    #[test]
    fn disturbance_switches_on_mid_iteration() {
        let cfg = ManipConfig {
            disturbance: Some(Disturbance { iteration: 3, offsets: [0.1, -0.1, 0.05], start_fraction: 0.5 }),
            ..ManipConfig::ideal()
        };
        let plant = ManipPlant::new(cfg, 20).unwrap();
        let u = plant.initial_input();
        assert!(plant.run(&u, 2, 0).unwrap().error.max_norm() < 1e-9);
        let hit = plant.run(&u, 3, 0).unwrap();
        assert!(hit.error.get(0, 9).abs() < 1e-9 && hit.error.get(1, 9).abs() < 1e-9);
        assert!(hit.error.get(0, 10).abs() + hit.error.get(1, 10).abs() > 1e-3);
        let after = plant.run(&u, 4, 0).unwrap();
        assert!(after.error.get(0, 0).abs() + after.error.get(1, 0).abs() > 1e-3);
    }

    #[test]
    fn zero_error_gives_zero_correction() {
        let plant = ManipPlant::new(ManipConfig::default(), 10).unwrap();
        let mut out = [1.0; 3];
        plant.direction(0, &[0.2, 0.4, 0.0], &[0.0, 0.0], &mut out);
        assert_eq!(out, [0.0; 3]);
    }
}
