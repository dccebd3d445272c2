//! Simulated plants: a raceline-tracking vehicle, a three-link planar arm
//! and a lifted linear system, plus the reference paths they follow.

mod linear;
mod manipulator;
mod vehicle;

use std::f64::consts::PI;
use std::io::Write;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{param_err, Result};

pub use linear::LinearPlant;
pub use manipulator::{
    damped_pinv, gen_circle_ref, manip_fk, manip_ik, manip_jacobian, manip_rollout, Disturbance, ManipConfig, ManipPlant,
    ManipPose, PINV_DAMPING,
};
pub use vehicle::{gen_raceline, lateral_error, pure_pursuit, vehicle_rollout, VehicleConfig, VehiclePlant, VehicleState};

/// Ordered planar waypoints with their generating parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePath {
    pub points: Vec<[f64; 2]>,
    pub s: Vec<f64>,
    /// The last point connects back to the first.
    pub closed: bool,
}

impl ReferencePath {
    pub fn new(points: Vec<[f64; 2]>, s: Vec<f64>, closed: bool) -> Result<Self> {
        if points.len() < 3 || points.len() != s.len() {
            return param_err(format!("a path needs at least 3 points with one parameter each, got {}", points.len()));
        }
        Ok(Self { points, s, closed })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Polyline length, including the closing segment when closed.
    pub fn length(&self) -> f64 {
        let seg = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
        let open: f64 = self.points.windows(2).map(|w| seg(w[0], w[1])).sum();
        if self.closed {
            open + seg(self.points[self.len() - 1], self.points[0])
        } else {
            open
        }
    }

    /// Point `k`, wrapping on closed paths and extrapolating linearly past
    /// the end of open ones.
    pub fn point(&self, k: usize) -> [f64; 2] {
        let n = self.len();
        if self.closed {
            return self.points[k % n];
        }
        if k < n {
            return self.points[k];
        }
        let (a, b) = (self.points[n - 2], self.points[n - 1]);
        let extra = (k - n + 1) as f64;
        [b[0] + extra * (b[0] - a[0]), b[1] + extra * (b[1] - a[1])]
    }

    /// Unit tangent at point `k` by central differences (one-sided at the
    /// ends of an open path).
    pub fn tangent(&self, k: usize) -> [f64; 2] {
        let n = self.len();
        let (prev, next) = if self.closed {
            ((k + n - 1) % n, (k + 1) % n)
        } else {
            (k.saturating_sub(1), (k + 1).min(n - 1))
        };
        let (a, b) = (self.points[prev], self.points[next]);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let norm = dx.hypot(dy);
        [dx / norm, dy / norm]
    }

    /// Writes `index,s,x,y` rows.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "index,s,x,y")?;
        for (k, (pt, s)) in self.points.iter().zip(&self.s).enumerate() {
            writeln!(out, "{k},{s},{},{}", pt[0], pt[1])?;
        }
        Ok(())
    }
}

/// `y = 0.25 + 0.04 sin(3t + pi/2)`, `z = 0.45 + 0.02 sin(2t)` for
/// `t in [0, 2 pi)`.
pub fn gen_lissajous_ref(p: usize) -> Result<ReferencePath> {
    if p < 3 {
        return param_err(format!("p must be at least 3, got {p}"));
    }
    let s: Vec<f64> = (0..p).map(|j| 2.0 * PI * j as f64 / p as f64).collect();
    let points = s.iter().map(|&t| [0.25 + 0.04 * (3.0 * t + PI / 2.0).sin(), 0.45 + 0.02 * (2.0 * t).sin()]).collect();
    ReferencePath::new(points, s, true)
}

/// Random stream for one iteration of one seed. Streams differ across
/// iterations so noise is redrawn while everything else repeats.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lissajous_start() {
        let path = gen_lissajous_ref(50).unwrap();
        assert!((path.points[0][0] - 0.29).abs() < 1e-15);
        assert!((path.points[0][1] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn open_path_helpers() {
        let pts: Vec<[f64; 2]> = (0..4).map(|k| [k as f64, 0.0]).collect();
        let path = ReferencePath::new(pts, vec![0.0, 1.0, 2.0, 3.0], false).unwrap();
        assert_eq!(path.length(), 3.0);
        assert_eq!(path.point(5), [5.0, 0.0]);
        assert_eq!(path.tangent(0), [1.0, 0.0]);
        assert_eq!(path.tangent(3), [1.0, 0.0]);
        assert!(ReferencePath::new(vec![[0.0, 0.0]; 2], vec![0.0; 2], true).is_err());
    }

    #[test]
    fn csv_export() {
        let path = gen_lissajous_ref(3).unwrap();
        let mut buf = Vec::new();
        path.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("index,s,x,y\n0,0,"));
    }

    #[test]
    fn streams_differ_by_iteration() {
        use rand::Rng;
        let a: f64 = iteration_rng(3, 1).random();
        let b: f64 = iteration_rng(3, 2).random();
        let c: f64 = iteration_rng(3, 1).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
