//! Iteration-domain controllers: update laws, gain schedules, contraction
//! diagnostics and the closed iteration loop.

mod contraction;
mod plant;
mod runner;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::trajectory::ErrorTrajectory;

pub use contraction::{contraction_block, contraction_element, lifted_omega, ContractionReport};
pub use plant::{apply_direction, FixedInput, InputPolicy, Plant, PlantRollout};
pub use runner::{
    element_matrix_predict, run_ilc_loop, ControllerConfig, ControllerKind, ElementMode, ExperimentRecord, GpSettings,
    LoopOutcome, LoopSettings, QpgpSettings,
};

/// A learning or predictive gain: a scalar times identity, or an explicit
/// `mp x np` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gain {
    Scalar(f64),
    /// Row-major rows.
    Matrix(Vec<Vec<f64>>),
}

impl Gain {
    pub fn validate(&self) -> Result<()> {
        match self {
            Gain::Scalar(v) if !(v.is_finite() && *v >= 0.0) => {
                param_err(format!("scalar gain must be finite and non-negative, got {v}"))
            }
            Gain::Matrix(rows) => {
                let cols = rows.first().map_or(0, Vec::len);
                if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
                    return shape_err("gain matrix must be a non-empty rectangle");
                }
                if rows.iter().flatten().any(|v| !v.is_finite()) {
                    return param_err("gain matrix entries must be finite");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn scaled(&self, factor: f64) -> Gain {
        self.map(|v| v * factor)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Gain {
        match self {
            Gain::Scalar(v) => Gain::Scalar(f(*v)),
            Gain::Matrix(rows) => Gain::Matrix(rows.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()),
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Gain::Scalar(v) => Some(*v),
            Gain::Matrix(_) => None,
        }
    }

    pub fn to_matrix(&self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        match self {
            Gain::Scalar(v) => {
                if rows != cols {
                    return shape_err(format!("scalar gain needs a square lifted map, got {rows}x{cols}"));
                }
                Ok(DMatrix::identity(rows, cols) * *v)
            }
            Gain::Matrix(m) => {
                if m.len() != rows || m[0].len() != cols {
                    return shape_err(format!("gain is {}x{}, expected {rows}x{cols}", m.len(), m[0].len()));
                }
                Ok(DMatrix::from_fn(rows, cols, |r, c| m[r][c]))
            }
        }
    }

    /// `gain * v` where `v` is a lifted error (`np`) and the result a lifted
    /// input (`mp`, `out_len`).
    pub fn apply(&self, v: &DVector<f64>, out_len: usize) -> Result<DVector<f64>> {
        match self {
            Gain::Scalar(s) => {
                if v.len() != out_len {
                    return shape_err(format!(
                        "scalar gain maps {} errors onto {out_len} inputs; use a matrix gain",
                        v.len()
                    ));
                }
                Ok(v * *s)
            }
            Gain::Matrix(_) => Ok(self.to_matrix(out_len, v.len())? * v),
        }
    }
}

/// How gains evolve over iterations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annealing {
    #[default]
    Constant,
    /// `base / i`.
    InverseIteration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSchedule {
    pub learning: Gain,
    #[serde(default = "zero_gain")]
    pub predictive: Gain,
    #[serde(default)]
    pub mode: Annealing,
}

fn zero_gain() -> Gain {
    Gain::Scalar(0.0)
}

impl GainSchedule {
    pub fn constant(l: f64, k: f64) -> Self {
        Self { learning: Gain::Scalar(l), predictive: Gain::Scalar(k), mode: Annealing::Constant }
    }

    pub fn inverse_iteration(l: f64, k: f64) -> Self {
        Self { learning: Gain::Scalar(l), predictive: Gain::Scalar(k), mode: Annealing::InverseIteration }
    }

    pub fn validate(&self) -> Result<()> {
        self.learning.validate()?;
        self.predictive.validate()
    }
}

/// Gains `(L_i, K_i)` for iteration `i >= 1`.
pub fn anneal(schedule: &GainSchedule, i: usize) -> Result<(Gain, Gain)> {
    if i < 1 {
        return param_err("iterations are numbered from 1");
    }
    match schedule.mode {
        Annealing::Constant => Ok((schedule.learning.clone(), schedule.predictive.clone())),
        Annealing::InverseIteration => {
            let div = |v: f64| v / i as f64;
            Ok((schedule.learning.map(div), schedule.predictive.map(div)))
        }
    }
}

/// `u_{i+1} = u_i + L_i e_i`.
pub fn standard_update(u: &DVector<f64>, e: &ErrorTrajectory, l: &Gain) -> Result<DVector<f64>> {
    Ok(u + l.apply(e.as_vector(), u.len())?)
}

/// `u_{i+1} = u_i + L_i e_i + K_i e^_{i+1}`.
pub fn predictive_update(
    u: &DVector<f64>,
    e: &ErrorTrajectory,
    e_hat: &ErrorTrajectory,
    l: &Gain,
    k: &Gain,
) -> Result<DVector<f64>> {
    if !e.same_shape(e_hat) {
        return shape_err("predicted error does not match the observed error's shape");
    }
    let mut next = standard_update(u, e, l)?;
    // A zero predictive term must leave the standard update bit-identical.
    if k != &Gain::Scalar(0.0) {
        next += k.apply(e_hat.as_vector(), u.len())?;
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(v: &[f64]) -> ErrorTrajectory {
        ErrorTrajectory::from_blocks(&[v.to_vec()]).unwrap()
    }

    #[test]
    fn standard_update_examples() {
        let u = DVector::from_vec(vec![0.0]);
        assert_eq!(standard_update(&u, &traj(&[2.0]), &Gain::Scalar(0.5)).unwrap()[0], 1.0);
        let u = DVector::from_vec(vec![0.3, -0.2]);
        assert_eq!(standard_update(&u, &traj(&[4.0, 5.0]), &Gain::Scalar(0.0)).unwrap(), u);
        let m = Gain::Matrix(vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]]);
        let out = standard_update(&DVector::zeros(3), &traj(&[1.0, 2.0]), &m).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 4.0, 3.0]);
        assert!(standard_update(&DVector::zeros(3), &traj(&[1.0, 2.0]), &Gain::Scalar(1.0)).is_err());
    }

    #[test]
    fn zero_predictive_gain_is_standard() {
        let u = DVector::from_vec(vec![0.1, 0.7]);
        let e = traj(&[0.3, -0.9]);
        let e_hat = traj(&[5.0, 5.0]);
        let a = predictive_update(&u, &e, &e_hat, &Gain::Scalar(0.37), &Gain::Scalar(0.0)).unwrap();
        let b = standard_update(&u, &e, &Gain::Scalar(0.37)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scalar_plant_recursions() {
        // g(u) = u, r = 1, so e = 1 - u.
        let mut u = DVector::from_vec(vec![0.0]);
        let mut e = traj(&[1.0]);
        for _ in 0..10 {
            u = standard_update(&u, &e, &Gain::Scalar(0.3)).unwrap();
            let next = traj(&[1.0 - u[0]]);
            assert!((next.get(0, 0) - 0.7 * e.get(0, 0)).abs() < 1e-15);
            e = next;
        }
        let mut u = DVector::from_vec(vec![0.0]);
        let mut e = traj(&[1.0]);
        for _ in 0..10 {
            let oracle = traj(&[0.7 * e.get(0, 0)]);
            u = predictive_update(&u, &e, &oracle, &Gain::Scalar(0.3), &Gain::Scalar(0.5)).unwrap();
            let next = traj(&[1.0 - u[0]]);
            assert!((next.get(0, 0) - 0.35 * e.get(0, 0)).abs() < 1e-15);
            e = next;
        }
        let u = predictive_update(&DVector::zeros(1), &traj(&[1.0]), &traj(&[1.0]), &Gain::Scalar(0.0), &Gain::Scalar(1.0))
            .unwrap();
        assert_eq!(1.0 - u[0], 0.0);
    }

    #[test]
    fn anneal_examples() {
        let c = GainSchedule::constant(0.25, 0.3);
        for i in [1, 7, 100] {
            assert_eq!(anneal(&c, i).unwrap().0, Gain::Scalar(0.25));
        }
        let inv = GainSchedule::inverse_iteration(1.0, 2.0);
        assert_eq!(anneal(&inv, 4).unwrap(), (Gain::Scalar(0.25), Gain::Scalar(0.5)));
        assert_eq!(anneal(&inv, 1).unwrap().0, Gain::Scalar(1.0));
        assert!(anneal(&inv, 0).is_err());
    }

    #[test]
    fn gain_json_forms() {
        let g: GainSchedule = serde_json::from_str(r#"{"learning": 0.25, "predictive": 0.3}"#).unwrap();
        assert_eq!(g, GainSchedule::constant(0.25, 0.3));
        let g: GainSchedule =
            serde_json::from_str(r#"{"learning": [[1.0, 0.0]], "mode": "inverse_iteration"}"#).unwrap();
        assert_eq!(g.predictive, Gain::Scalar(0.0));
        assert!(serde_json::from_str::<GainSchedule>(r#"{"learning": 1.0, "gain": 2}"#).is_err());
    }
}
