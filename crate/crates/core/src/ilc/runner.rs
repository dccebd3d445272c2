use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::gp_baseline::{
    block_queries, fit_full_gp, fit_sparse_gp, prefit_kernel, FullGp, GpDataset, GpKernel, PrefitOptions, SparseGp,
    SparseOptions,
};
use crate::qpgp::{block_predict, predictor_matrix, EstimatorOptions, KernelMode, OnlineElementPredictor, QpgpEstimator, QpgpModel, Stage1Options};
use crate::trajectory::ErrorTrajectory;

use super::plant::{apply_direction, FixedInput, InputPolicy, Plant, PlantRollout};
use super::{anneal, predictive_update, Gain, GainSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Standard,
    QpgpBlock,
    QpgpElement,
    GpFull,
    GpSparse,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Standard => "standard",
            ControllerKind::QpgpBlock => "qpgp_block",
            ControllerKind::QpgpElement => "qpgp_element",
            ControllerKind::GpFull => "gp_full",
            ControllerKind::GpSparse => "gp_sparse",
        }
    }

    pub fn is_qpgp(self) -> bool {
        matches!(self, ControllerKind::QpgpBlock | ControllerKind::QpgpElement)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    pub gains: GainSchedule,
    /// Inducing-point count for `gp_sparse`; falls back to the GP settings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inducing: Option<usize>,
    /// Name used in outputs; defaults to the kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl ControllerConfig {
    pub fn new(kind: ControllerKind, gains: GainSchedule) -> Self {
        Self { kind, gains, inducing: None, label: None }
    }

    pub fn id(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.gains.validate()?;
        if self.kind == ControllerKind::QpgpElement && self.gains.predictive.as_scalar().is_none() {
            return Err(Error::Config("qpgp_element needs a scalar predictive gain".into()));
        }
        if self.inducing == Some(0) {
            return Err(Error::Config("inducing must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpgpSettings {
    pub kernel_mode: KernelMode,
    pub stage1: Stage1Options,
    /// Residual pairs the kernel must rest on before element-wise online
    /// corrections start. Kernels from one or two pairs are poorly shaped
    /// and the within-iteration correction then destabilizes some plants.
    pub online_min_pairs: usize,
    pub element_mode: ElementMode,
}

impl Default for QpgpSettings {
    fn default() -> Self {
        Self {
            kernel_mode: KernelMode::default(),
            stage1: Stage1Options::default(),
            online_min_pairs: 5,
            element_mode: ElementMode::default(),
        }
    }
}

/// How `qpgp_element` applies its prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementMode {
    /// Add `K e^(t)` during the next rollout, each element predicted from the
    /// prefix observed so far.
    #[default]
    Online,
    /// Between iterations, forecast the whole block with the predictor
    /// matrix, every prefix element replaced by its own forecast.
    Matrix,
}

/// `e^_{i+1}` from the analysis-mode predictor matrices `M^(p)` of every
/// dimension.
pub fn element_matrix_predict(model: &QpgpModel, e: &ErrorTrajectory) -> Result<ErrorTrajectory> {
    let (n, p) = (model.n(), model.p());
    if e.n() != n || e.p() != p {
        return Err(Error::Shape(format!("error block is {}x{}, model is {n}x{p}", e.n(), e.p())));
    }
    let mut out = ErrorTrajectory::zeros(n, p);
    for j in 0..n {
        let m = predictor_matrix(model, p, j)?.m;
        out.block_mut(j).copy_from(&(m * e.block(j)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpSettings {
    pub kernel: GpKernel,
    pub noise: f64,
    /// Keep every `time_stride`-th timestep of each block as training data.
    pub time_stride: usize,
    pub inducing: usize,
    pub kmeans_iters: usize,
    /// Lloyd sweeps when warm-started from the previous inducing set.
    pub warm_kmeans_iters: usize,
    pub refine_evals: usize,
    pub refine_step: f64,
    /// Maximize the marginal likelihood once, after this many iterations.
    pub prefit_after: Option<usize>,
}

impl Default for GpSettings {
    fn default() -> Self {
        Self {
            kernel: GpKernel { variance: 0.01, iteration_lengthscale: 3.0, time_lengthscale: 8.0 },
            noise: 0.01,
            time_stride: 5,
            inducing: 100,
            kmeans_iters: 20,
            warm_kmeans_iters: 2,
            refine_evals: 10,
            refine_step: 0.5,
            prefit_after: None,
        }
    }
}

impl GpSettings {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.noise.is_finite() && self.noise > 0.0) {
            return Err(Error::Config(format!("GP noise must be positive, got {}", self.noise)));
        }
        if self.time_stride == 0 || self.inducing == 0 {
            return Err(Error::Config("time_stride and inducing must be at least 1".into()));
        }
        if self.prefit_after == Some(0) {
            return Err(Error::Config("prefit_after must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoopSettings {
    pub qpgp: QpgpSettings,
    pub gp: GpSettings,
    /// Use this model instead of estimating one (QPGP controllers only).
    pub fixed_model: Option<QpgpModel>,
}

/// One row of `records.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub controller: String,
    pub seed: u64,
    pub iteration: usize,
    pub rms_error: f64,
    pub max_error: f64,
    pub predict_s: f64,
    pub estimate_s: f64,
    pub rollout_s: f64,
    /// Controller compute (predict + estimate + update) summed so far.
    pub cumulative_s: f64,
}

#[derive(Clone, Debug)]
pub struct LoopOutcome {
    pub records: Vec<ExperimentRecord>,
    pub rollouts: Vec<PlantRollout>,
    /// Set when the loop stopped on a non-finite signal.
    pub aborted: Option<String>,
    pub final_model: Option<QpgpModel>,
}

enum GpModel {
    Full(FullGp),
    Sparse(SparseGp),
}

struct GpLearner {
    settings: GpSettings,
    inducing: Option<usize>,
    data: Vec<GpDataset>,
    kernels: Vec<GpKernel>,
    noise: Vec<f64>,
    models: Vec<Option<GpModel>>,
}

impl GpLearner {
    fn new(n: usize, settings: &GpSettings, inducing: Option<usize>) -> Result<Self> {
        let empty = GpDataset::new(Vec::new(), Vec::new())?;
        Ok(Self {
            settings: settings.clone(),
            inducing,
            data: vec![empty; n],
            kernels: vec![settings.kernel; n],
            noise: vec![settings.noise; n],
            models: (0..n).map(|_| None).collect(),
        })
    }

    fn observe(&mut self, i: usize, e: &ErrorTrajectory, seed: u64) -> Result<()> {
        let stride = self.settings.time_stride;
        for j in 0..self.data.len() {
            self.data[j].push_block(i, e, j, stride)?;
            if self.settings.prefit_after == Some(i) {
                let (k, s) = prefit_kernel(&self.data[j], self.kernels[j], self.noise[j], &PrefitOptions::default())?;
                log::debug!("dimension {j}: prefit kernel {k:?}, noise {s:.3e}");
                self.kernels[j] = k;
                self.noise[j] = s;
            }
            let model = match self.inducing {
                None => GpModel::Full(fit_full_gp(&self.data[j], self.kernels[j], self.noise[j])?),
                Some(m) => {
                    let warm = match &self.models[j] {
                        Some(GpModel::Sparse(prev)) => Some(prev.inducing().to_vec()),
                        _ => None,
                    };
                    let opts = SparseOptions {
                        kmeans_iters: if warm.is_some() { self.settings.warm_kmeans_iters } else { self.settings.kmeans_iters },
                        refine_evals: self.settings.refine_evals,
                        refine_step: self.settings.refine_step,
                        seed: seed ^ (j as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                    };
                    GpModel::Sparse(fit_sparse_gp(
                        &self.data[j],
                        m,
                        self.kernels[j],
                        self.noise[j],
                        &opts,
                        warm.as_deref(),
                    )?)
                }
            };
            self.models[j] = Some(model);
        }
        Ok(())
    }

    /// Nothing is predicted from a single block: it carries no information
    /// about how errors evolve across iterations.
    fn predict(&self, next: usize, p: usize) -> Option<ErrorTrajectory> {
        if next < 3 {
            return None;
        }
        let queries = block_queries(next, p);
        let n = self.models.len();
        let mut out = ErrorTrajectory::zeros(n, p);
        for (j, model) in self.models.iter().enumerate() {
            let mean = match model.as_ref()? {
                GpModel::Full(gp) => gp.predict(&queries),
                GpModel::Sparse(gp) => gp.predict(&queries),
            };
            out.block_mut(j).copy_from(&mean);
        }
        Some(out)
    }
}

enum Learner {
    None,
    Qpgp { estimator: QpgpEstimator, fixed: Option<QpgpModel> },
    Gp(Box<GpLearner>),
}

impl Learner {
    /// The model used for online element corrections: only once the kernel
    /// rests on `min_pairs` consecutive-block residuals.
    fn online_model(&self, min_pairs: usize) -> Option<&QpgpModel> {
        match self {
            Learner::Qpgp { fixed: Some(m), .. } => Some(m),
            Learner::Qpgp { estimator, .. } if estimator.stats(0).pairs() >= min_pairs => estimator.model(),
            _ => None,
        }
    }

    fn qpgp_model(&self) -> Option<&QpgpModel> {
        match self {
            Learner::Qpgp { fixed: Some(m), .. } => Some(m),
            Learner::Qpgp { estimator, .. } => estimator.model(),
            _ => None,
        }
    }
}

/// Adds `K * e^(t)` sample by sample, predicting each element from the
/// samples of the current iteration already measured.
struct OnlinePolicy<'a> {
    plant: &'a dyn Plant,
    base: DVector<f64>,
    k: f64,
    predictor: OnlineElementPredictor,
    u_t: Vec<f64>,
    signal: Vec<f64>,
    correction: Vec<f64>,
    elapsed: f64,
}

impl InputPolicy for OnlinePolicy<'_> {
    fn input(&mut self, t: usize, out: &mut [f64]) -> Result<()> {
        let start = Instant::now();
        let p = self.plant.p();
        for (k, u) in self.u_t.iter_mut().enumerate() {
            *u = self.base[k * p + t];
        }
        for (j, s) in self.signal.iter_mut().enumerate() {
            *s = self.k * self.predictor.predict(j, t)?;
        }
        self.plant.direction(t, &self.u_t, &self.signal, &mut self.correction);
        let bound = self.plant.input_bound().unwrap_or(f64::INFINITY);
        for k in 0..out.len() {
            out[k] = (self.u_t[k] + self.correction[k]).clamp(-bound, bound);
        }
        self.elapsed += start.elapsed().as_secs_f64();
        Ok(())
    }

    fn observe(&mut self, t: usize, error: &[f64]) -> Result<()> {
        let start = Instant::now();
        for (j, &v) in error.iter().enumerate() {
            self.predictor.observe(j, t, v)?;
        }
        self.elapsed += start.elapsed().as_secs_f64();
        Ok(())
    }
}

/// Runs `iterations` passes of `controller` on `plant`.
///
/// A non-finite error or input stops the loop early; the outcome then
/// carries the records so far, the offending record and a diagnostic.
pub fn run_ilc_loop(
    plant: &dyn Plant,
    controller: &ControllerConfig,
    settings: &LoopSettings,
    iterations: usize,
    seed: u64,
) -> Result<LoopOutcome> {
    controller.validate()?;
    if iterations == 0 {
        return param_err("need at least one iteration");
    }
    let (n, m, p) = (plant.n(), plant.m(), plant.p());
    let kind = controller.kind;
    let mut learner = match kind {
        ControllerKind::Standard => Learner::None,
        ControllerKind::QpgpBlock | ControllerKind::QpgpElement => {
            if let Some(fixed) = &settings.fixed_model {
                if fixed.n() != n || fixed.p() != p {
                    return Err(Error::Config("fixed model does not match the plant's (n, p)".into()));
                }
            }
            let opts = EstimatorOptions {
                stage1: settings.qpgp.stage1,
                kernel_mode: settings.qpgp.kernel_mode,
                ..Default::default()
            };
            Learner::Qpgp { estimator: QpgpEstimator::new(n, p, opts), fixed: settings.fixed_model.clone() }
        }
        ControllerKind::GpFull => {
            settings.gp.validate()?;
            Learner::Gp(Box::new(GpLearner::new(n, &settings.gp, None)?))
        }
        ControllerKind::GpSparse => {
            settings.gp.validate()?;
            let m_ind = controller.inducing.unwrap_or(settings.gp.inducing);
            Learner::Gp(Box::new(GpLearner::new(n, &settings.gp, Some(m_ind))?))
        }
    };

    let id = controller.id();
    let mut u = plant.initial_input();
    if u.len() != m * p {
        return Err(Error::Shape(format!("plant's initial input has length {}, expected {}", u.len(), m * p)));
    }
    let mut records = Vec::with_capacity(iterations);
    let mut rollouts = Vec::with_capacity(iterations);
    let mut cumulative = 0.0;
    // Element mode: (previous error, K) for the online correction of the
    // coming rollout.
    let mut online: Option<(ErrorTrajectory, f64)> = None;
    let online_mode = settings.qpgp.element_mode == ElementMode::Online;

    for i in 1..=iterations {
        let mut predict_s = 0.0;
        let start = Instant::now();
        let model = learner.online_model(settings.qpgp.online_min_pairs);
        let result = match (&online, model) {
            (Some((prev, k)), Some(model)) => {
                let build = Instant::now();
                let predictor = OnlineElementPredictor::new(model, prev)?;
                let mut policy = OnlinePolicy {
                    plant,
                    base: u.clone(),
                    k: *k,
                    predictor,
                    u_t: vec![0.0; m],
                    signal: vec![0.0; n],
                    correction: vec![0.0; m],
                    elapsed: build.elapsed().as_secs_f64(),
                };
                let r = plant.rollout(i, seed, &mut policy);
                predict_s += policy.elapsed;
                r
            }
            _ => plant.rollout(i, seed, &mut FixedInput::new(u.clone(), p)?),
        };
        let rollout = match result {
            Ok(r) => r,
            Err(Error::Aborted(why)) => {
                let msg = format!("{id}, seed {seed}, iteration {i}: {why}");
                log::error!("{msg}");
                return Ok(LoopOutcome { records, rollouts, aborted: Some(msg), final_model: learner.qpgp_model().cloned() });
            }
            Err(other) => return Err(other),
        };
        let rollout_s = (start.elapsed().as_secs_f64() - predict_s).max(0.0);
        let e = rollout.error.clone();
        let mut record = ExperimentRecord {
            controller: id.clone(),
            seed,
            iteration: i,
            rms_error: e.rms(),
            max_error: e.max_norm(),
            predict_s,
            estimate_s: 0.0,
            rollout_s,
            cumulative_s: cumulative + predict_s,
        };
        if !e.is_finite() || rollout.inputs.iter().any(|v| !v.is_finite()) {
            records.push(record);
            rollouts.push(rollout);
            let msg = format!("{id}, seed {seed}: non-finite error or input at iteration {i}");
            log::error!("{msg}");
            return Ok(LoopOutcome { records, rollouts, aborted: Some(msg), final_model: learner.qpgp_model().cloned() });
        }
        u = rollout.inputs.clone();

        if i < iterations {
            let start = Instant::now();
            match &mut learner {
                Learner::None => {}
                Learner::Qpgp { estimator, fixed } => {
                    if fixed.is_none() {
                        estimator.push(&e)?;
                        if estimator.ready() {
                            estimator.estimate()?;
                        }
                    }
                }
                Learner::Gp(gp) => gp.observe(i, &e, seed)?,
            }
            record.estimate_s = start.elapsed().as_secs_f64();

            let start = Instant::now();
            let (l_i, k_i) = anneal(&controller.gains, i)?;
            let e_hat = match (&learner, kind) {
                (Learner::Qpgp { .. }, ControllerKind::QpgpBlock) => {
                    learner.qpgp_model().map(|model| block_predict(model, &e)).transpose()?
                }
                (Learner::Qpgp { .. }, ControllerKind::QpgpElement) if !online_mode => {
                    learner.qpgp_model().map(|model| element_matrix_predict(model, &e)).transpose()?
                }
                (Learner::Gp(gp), _) => gp.predict(i + 1, p),
                _ => None,
            };
            let predict_elapsed = start.elapsed().as_secs_f64();

            let start = Instant::now();
            let k_block = if kind == ControllerKind::QpgpElement && online_mode { Gain::Scalar(0.0) } else { k_i.clone() };
            u = match (l_i.as_scalar(), k_block.as_scalar()) {
                (Some(l), Some(k)) => {
                    let mut signal = e.as_vector() * l;
                    if let Some(e_hat) = &e_hat {
                        if k != 0.0 {
                            signal += e_hat.as_vector() * k;
                        }
                    }
                    &u + apply_direction(plant, &u, &signal)?
                }
                _ => {
                    let zero = ErrorTrajectory::zeros(n, p);
                    predictive_update(&u, &e, e_hat.as_ref().unwrap_or(&zero), &l_i, &k_block)?
                }
            };
            if let Some(bound) = plant.input_bound() {
                u.apply(|v| *v = v.clamp(-bound, bound));
            }
            if kind == ControllerKind::QpgpElement && online_mode {
                online = Some((e.clone(), k_i.as_scalar().unwrap_or(0.0)));
            }
            let update_s = start.elapsed().as_secs_f64();
            record.predict_s += predict_elapsed;
            cumulative += record.predict_s + record.estimate_s + update_s;
            record.cumulative_s = cumulative;
        } else {
            cumulative += predict_s;
            record.cumulative_s = cumulative;
        }
        records.push(record);
        rollouts.push(rollout);
    }
    Ok(LoopOutcome { records, rollouts, aborted: None, final_model: learner.qpgp_model().cloned() })
}
