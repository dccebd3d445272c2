use std::f64::consts::PI;

use nalgebra::DVector;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::ilc::{FixedInput, InputPolicy, Plant, PlantRollout};
use crate::trajectory::ErrorTrajectory;

use super::{iteration_rng, ReferencePath};

/// Kinematic bicycle with a corrupted steering channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleConfig {
    pub speed: f64,
    pub wheelbase: f64,
    pub dt: f64,
    pub steering_gain: f64,
    /// Constant steering offset, rad.
    pub bias: f64,
    /// Steering offset growth per step within a lap, rad/step.
    pub drift_slope: f64,
    /// Variance of the per-step steering noise, rad^2.
    pub noise_variance: f64,
    /// Heading drift added every step, rad.
    pub heading_drift: f64,
    pub saturation: f64,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        Self {
            speed: 8.0,
            wheelbase: 0.5,
            dt: 0.01,
            steering_gain: 0.7,
            bias: 0.15,
            drift_slope: 0.01,
            noise_variance: 0.015,
            heading_drift: 0.04,
            saturation: 0.5,
        }
    }
}

impl VehicleConfig {
    /// Nominal geometry with every corruption term removed and unit gain.
    pub fn ideal() -> Self {
        Self {
            steering_gain: 1.0,
            bias: 0.0,
            drift_slope: 0.0,
            noise_variance: 0.0,
            heading_drift: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("speed", self.speed),
            ("wheelbase", self.wheelbase),
            ("dt", self.dt),
            ("steering_gain", self.steering_gain),
            ("saturation", self.saturation),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("vehicle {name} must be positive, got {v}")));
            }
        }
        if !(self.noise_variance.is_finite() && self.noise_variance >= 0.0) {
            return Err(Error::Config(format!("noise variance must be non-negative, got {}", self.noise_variance)));
        }
        if ![self.bias, self.drift_slope, self.heading_drift].iter().all(|v| v.is_finite()) {
            return Err(Error::Config("vehicle biases must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Closed track `R(s) = 10 + 2 sin 2s + sin 3s` sampled at `s_j = 2 pi j / p`,
/// `j = 1..p`, and scaled so one lap is `v dt p` long.
pub fn gen_raceline(p: usize, v: f64, dt: f64) -> Result<ReferencePath> {
    if p < 3 {
        return param_err(format!("p must be at least 3, got {p}"));
    }
    if !(v > 0.0 && dt > 0.0) {
        return param_err("speed and dt must be positive");
    }
    let s: Vec<f64> = (1..=p).map(|j| 2.0 * PI * j as f64 / p as f64).collect();
    let raw: Vec<[f64; 2]> = s
        .iter()
        .map(|&s| {
            let r = 10.0 + 2.0 * (2.0 * s).sin() + (3.0 * s).sin();
            [r * s.cos(), r * s.sin()]
        })
        .collect();
    let unscaled = ReferencePath::new(raw, s, true)?;
    let scale = v * dt * p as f64 / unscaled.length();
    let points = unscaled.points.iter().map(|q| [q[0] * scale, q[1] * scale]).collect();
    ReferencePath::new(points, unscaled.s, true)
}

/// Pure-pursuit steering towards `target`.
pub fn pure_pursuit(state: &VehicleState, target: [f64; 2], wheelbase: f64) -> f64 {
    let (dx, dy) = (target[0] - state.x, target[1] - state.y);
    let d = dx.hypot(dy);
    if d == 0.0 {
        log::warn!("pure pursuit target coincides with the vehicle; steering 0");
        return 0.0;
    }
    let alpha = dy.atan2(dx) - state.theta;
    (2.0 * wheelbase * alpha.sin() / d).atan()
}

/// Signed distance from `pos` to the nearest reference point along that
/// point's left normal.
pub fn lateral_error(pos: [f64; 2], path: &ReferencePath) -> f64 {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, q) in path.points.iter().enumerate() {
        let d = (pos[0] - q[0]).powi(2) + (pos[1] - q[1]).powi(2);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    let t = path.tangent(best);
    let q = path.points[best];
    -t[1] * (pos[0] - q[0]) + t[0] * (pos[1] - q[1])
}

/// One lap. The error is the negated lateral deviation, so a positive error
/// asks for more (leftward) steering. Sample `k` is measured at the first
/// position that steering command `k` influences.
pub fn vehicle_rollout(
    config: &VehicleConfig,
    path: &ReferencePath,
    policy: &mut dyn InputPolicy,
    seed: u64,
    iteration: usize,
) -> Result<PlantRollout> {
    let p = path.len();
    let t0 = path.tangent(0);
    let mut state = VehicleState { x: path.points[0][0], y: path.points[0][1], theta: t0[1].atan2(t0[0]) };
    let mut rng = iteration_rng(seed, iteration);
    let noise = Normal::new(0.0, config.noise_variance.sqrt()).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut inputs = DVector::zeros(p);
    let mut outputs = DVector::zeros(p);
    let mut error = ErrorTrajectory::zeros(1, p);
    let mut path_out = Vec::with_capacity(p);
    let mut ff = [0.0];
    for idx in 0..p {
        let k = (idx + 1) as f64;
        policy.input(idx, &mut ff)?;
        let fb = pure_pursuit(&state, path.point(idx + 1), config.wheelbase);
        let eps = if config.noise_variance > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        let raw = config.steering_gain * (ff[0] + fb) + config.bias + config.drift_slope * k + eps;
        let delta = raw.clamp(-config.saturation, config.saturation);
        state.x += config.speed * state.theta.cos() * config.dt;
        state.y += config.speed * state.theta.sin() * config.dt;
        state.theta += config.speed / config.wheelbase * delta.tan() * config.dt + config.heading_drift;
        if !(state.x.is_finite() && state.y.is_finite() && state.theta.is_finite()) {
            return Err(Error::Aborted(format!("vehicle state became non-finite at step {}", idx + 1)));
        }
        // Steering reaches position only through the next heading, so the
        // sample for this step is taken where that heading carries the car.
        let ahead = [
            state.x + config.speed * state.theta.cos() * config.dt,
            state.y + config.speed * state.theta.sin() * config.dt,
        ];
        let lat = lateral_error(ahead, path);
        inputs[idx] = ff[0];
        outputs[idx] = lat;
        error.set(0, idx, -lat);
        path_out.push([state.x, state.y]);
        policy.observe(idx, &[-lat])?;
    }
    Ok(PlantRollout { inputs, outputs, error, path: path_out })
}

/// The vehicle as a repeated task: one lap per iteration, feedforward
/// steering as input.
#[derive(Clone, Debug)]
pub struct VehiclePlant {
    config: VehicleConfig,
    path: ReferencePath,
}

impl VehiclePlant {
    pub fn new(config: VehicleConfig, p: usize) -> Result<Self> {
        config.validate()?;
        let path = gen_raceline(p, config.speed, config.dt)?;
        Ok(Self { config, path })
    }

    pub fn with_path(config: VehicleConfig, path: ReferencePath) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, path })
    }

    pub fn path(&self) -> &ReferencePath {
        &self.path
    }

    pub fn config(&self) -> &VehicleConfig {
        &self.config
    }

    /// Rolls out a fixed feedforward.
    pub fn run(&self, ff: &DVector<f64>, iteration: usize, seed: u64) -> Result<PlantRollout> {
        self.rollout(iteration, seed, &mut FixedInput::new(ff.clone(), self.path.len())?)
    }
}

impl Plant for VehiclePlant {
    fn name(&self) -> &str {
        "vehicle"
    }

    fn n(&self) -> usize {
        1
    }

    fn m(&self) -> usize {
        1
    }

    fn p(&self) -> usize {
        self.path.len()
    }

    fn initial_input(&self) -> DVector<f64> {
        DVector::zeros(self.path.len())
    }

    /// Past this feedforward the steering stays saturated whatever the
    /// feedback (`|fb| < pi/2`) and the bias do.
    fn input_bound(&self) -> Option<f64> {
        let c = &self.config;
        let bias = c.bias.abs() + c.drift_slope.abs() * self.path.len() as f64;
        Some((c.saturation + bias) / c.steering_gain + PI / 2.0)
    }

    fn rollout(&self, iteration: usize, seed: u64, policy: &mut dyn InputPolicy) -> Result<PlantRollout> {
        vehicle_rollout(&self.config, &self.path, policy, seed, iteration)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raceline_start_and_length() {
        let path = gen_raceline(200, 8.0, 0.05).unwrap();
        assert!(((path.length() - 80.0) / 80.0).abs() < 1e-9);
        // s_p = 2 pi sits at the unscaled point (10, 0).
        let last = path.points[199];
        assert!(last[1].abs() < 1e-9 && last[0] > 0.0);
        assert!(gen_raceline(2, 8.0, 0.05).is_err());
    }

    #[test]
    fn pure_pursuit_examples() {
        let s = VehicleState { x: 0.0, y: 0.0, theta: 0.0 };
        assert_eq!(pure_pursuit(&s, [3.0, 0.0], 0.5), 0.0);
        assert!((pure_pursuit(&s, [0.0, 1.0], 0.5) - PI / 4.0).abs() < 1e-15);
        assert!(pure_pursuit(&s, [1.0, 0.5], 0.5) > 0.0);
        assert!(pure_pursuit(&s, [1.0, -0.5], 0.5) < 0.0);
        assert_eq!(pure_pursuit(&s, [0.0, 0.0], 0.5), 0.0);
    }

    #[test]
    fn lateral_error_examples() {
        let path = gen_raceline(100, 8.0, 0.05).unwrap();
        let k = 17;
        let q = path.points[k];
        assert_eq!(lateral_error(q, &path), 0.0);
        let t = path.tangent(k);
        let nrm = [-t[1], t[0]];
        let off = |d: f64| [q[0] + d * nrm[0], q[1] + d * nrm[1]];
        assert!((lateral_error(off(0.1), &path) - 0.1).abs() < 1e-12);
        assert!((lateral_error(off(-0.1), &path) + 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_feedforward_is_biased_and_deterministic() {
        let plant = VehiclePlant::new(VehicleConfig::default(), 100).unwrap();
        let ff = DVector::zeros(100);
        let a = plant.run(&ff, 1, 5).unwrap();
        let b = plant.run(&ff, 1, 5).unwrap();
        assert!(a.error.rms() > 0.0);
        assert_eq!(a.error, b.error);
        let c = plant.run(&ff, 1, 6).unwrap();
        assert_ne!(a.error, c.error);
    }
}
