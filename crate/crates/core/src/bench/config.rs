use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ilc::{ControllerConfig, GpSettings, Plant, QpgpSettings};
use crate::sim::{Disturbance, ManipConfig, ManipPlant, ReferencePath, VehicleConfig, VehiclePlant};

/// Which benchmark to run, with its physical parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantConfig {
    Vehicle(VehicleConfig),
    Manipulator(ManipConfig),
}

impl PlantConfig {
    pub fn name(&self) -> &'static str {
        match self {
            PlantConfig::Vehicle(_) => "vehicle",
            PlantConfig::Manipulator(_) => "manipulator",
        }
    }
}

/// Names accepted for `plant.kind`.
pub const PLANT_KINDS: [&str; 2] = ["vehicle", "manipulator"];

/// A full experiment: one plant, several controllers, several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Used for the default output directory name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub plant: PlantConfig,
    pub controllers: Vec<ControllerConfig>,
    pub iterations: usize,
    pub p: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub qpgp: QpgpSettings,
    #[serde(default)]
    pub gp: GpSettings,
    /// Manipulator only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<Disturbance>,
    /// Iterations whose executed paths go to `trajectories.csv`. Defaults to
    /// the first, the 50th (when run) and the last.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_iterations: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Settings chosen for this artifact rather than taken from a source;
    /// copied into the manifest.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub artifact_choices: Vec<String>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 2 {
            return Err(Error::Config(format!("iterations must be at least 2, got {}", self.iterations)));
        }
        if self.p < 3 {
            return Err(Error::Config(format!("p must be at least 3, got {}", self.p)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.controllers.is_empty() {
            return Err(Error::Config("controllers must not be empty".into()));
        }
        let mut ids = HashSet::new();
        for c in &self.controllers {
            c.validate()?;
            if !ids.insert(c.id()) {
                return Err(Error::Config(format!("controller id {:?} appears twice; set a label", c.id())));
            }
        }
        let mut seeds = HashSet::new();
        if !self.seeds.iter().all(|s| seeds.insert(*s)) {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        self.gp.validate()?;
        if let Some(d) = &self.disturbance {
            if matches!(self.plant, PlantConfig::Vehicle(_)) {
                return Err(Error::Config("disturbance is only supported for the manipulator".into()));
            }
            if d.iteration > self.iterations {
                return Err(Error::Config(format!(
                    "disturbance iteration {} is past the last iteration {}",
                    d.iteration, self.iterations
                )));
            }
        }
        if let Some(its) = &self.trajectory_iterations {
            if let Some(bad) = its.iter().find(|&&i| i < 1 || i > self.iterations) {
                return Err(Error::Config(format!("trajectory iteration {bad} is outside 1..={}", self.iterations)));
            }
        }
        // Plant-level checks (reachability, positivity).
        self.build_plant()?;
        Ok(())
    }

    pub fn trajectory_iterations(&self) -> Vec<usize> {
        let mut its = match &self.trajectory_iterations {
            Some(v) => v.clone(),
            None => vec![1, 50.min(self.iterations), self.iterations],
        };
        its.sort_unstable();
        its.dedup();
        its
    }

    /// The configured plant and the reference path it tracks.
    pub fn build_plant(&self) -> Result<(Box<dyn Plant>, ReferencePath)> {
        let wrap = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        match &self.plant {
            PlantConfig::Vehicle(c) => {
                let plant = VehiclePlant::new(c.clone(), self.p).map_err(wrap)?;
                let path = plant.path().clone();
                Ok((Box::new(plant), path))
            }
            PlantConfig::Manipulator(c) => {
                let config = ManipConfig { disturbance: self.disturbance.clone(), ..c.clone() };
                let plant = ManipPlant::new(config, self.p).map_err(wrap)?;
                let path = plant.reference().clone();
                Ok((Box::new(plant), path))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "plant": {"kind": "vehicle"},
        "controllers": [{"kind": "standard", "gains": {"learning": 1.0}}],
        "iterations": 2, "p": 50, "seeds": [0]
    }"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.plant, PlantConfig::Vehicle(VehicleConfig::default()));
        assert_eq!(c.trajectory_iterations(), vec![1, 2]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let extra = MINIMAL.replace("\"p\": 50", "\"p\": 50, \"colour\": 1");
        assert!(matches!(ExperimentConfig::from_json(&extra), Err(Error::Config(_))));
        let nested = MINIMAL.replace("{\"kind\": \"vehicle\"}", "{\"kind\": \"vehicle\", \"mass\": 3}");
        assert!(ExperimentConfig::from_json(&nested).is_err());
        let kind = MINIMAL.replace("\"vehicle\"", "\"boat\"");
        assert!(ExperimentConfig::from_json(&kind).is_err());
    }

    #[test]
    fn invariants_are_enforced() {
        for (from, to) in [
            ("\"iterations\": 2", "\"iterations\": 1"),
            ("\"p\": 50", "\"p\": 2"),
            ("\"seeds\": [0]", "\"seeds\": []"),
            ("\"seeds\": [0]", "\"seeds\": [1, 1]"),
        ] {
            assert!(ExperimentConfig::from_json(&MINIMAL.replace(from, to)).is_err(), "{to}");
        }
        let none = MINIMAL.replace(r#"{"kind": "standard", "gains": {"learning": 1.0}}"#, "");
        assert!(ExperimentConfig::from_json(&none).is_err());
        let twice = MINIMAL.replace(
            r#"{"kind": "standard", "gains": {"learning": 1.0}}"#,
            r#"{"kind": "standard", "gains": {"learning": 1.0}}, {"kind": "standard", "gains": {"learning": 0.5}}"#,
        );
        assert!(ExperimentConfig::from_json(&twice).is_err());
    }

    #[test]
    fn disturbance_needs_the_manipulator() {
        let v = MINIMAL.replace("\"seeds\": [0]", "\"seeds\": [0], \"disturbance\": {\"iteration\": 2, \"offsets\": [0.1, 0, 0]}");
        assert!(ExperimentConfig::from_json(&v).is_err());
        let m = v.replace("\"vehicle\"", "\"manipulator\"");
        let c = ExperimentConfig::from_json(&m).unwrap();
        let (plant, path) = c.build_plant().unwrap();
        assert_eq!((plant.n(), plant.m(), path.len()), (2, 3, 50));
    }

    #[test]
    fn round_trips_through_json() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(c, back);
    }
}
