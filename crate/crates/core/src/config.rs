//! Declarative scenario files.
//!
//! A scenario is a TOML document carrying `schema_version = 1`, the state
//! dimension, a backend kind, a solver grid, one or more named conditions and
//! optional `[bound]` and `[experiment]` tables. See `configs/` for complete
//! examples.
//!
//! ```toml
//! schema_version = 1
//! dim = 2
//!
//! [backend]
//! kind = "gaussian-mixture"
//!
//! [schedule]
//! steps = 10          # or total_steps + n_max for a truncated grid
//! t_start = 1.0
//!
//! [[conditions]]
//! tag = "src"
//! [conditions.mixture]
//! weights = [0.5, 0.5]
//! means = [[-1.0, 0.0], [1.0, 0.0]]
//! covariances = [[[0.3, 0.0], [0.0, 0.3]], [[0.3, 0.0], [0.0, 0.3]]]
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::backend::{AffineParams, BackendKind, Condition, Payload, VelocityBackend};
use crate::bound::{BoundConfig, DEFAULT_ALPHAS, DEFAULT_REALIZATIONS, DEFAULT_SAFETY};
use crate::ddim::DdimSchedule;
use crate::error::{Error, Result};
use crate::experiments::{ExperimentConfig, Init, Method, Task};
use crate::flow::{BlackBoxFlow, Solver};
use crate::mixture::{GaussianMixture, MixtureSpec};
use crate::schedule::FlowSchedule;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub dim: usize,
    pub backend: BackendSection,
    pub schedule: ScheduleSection,
    pub conditions: Vec<ConditionSection>,
    #[serde(default)]
    pub bound: Option<BoundSection>,
    #[serde(default)]
    pub experiment: Option<ExperimentSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    /// Euler steps on a uniform grid from `t_start` to 0.
    pub steps: Option<usize>,
    pub t_start: Option<f64>,
    /// Truncated grid: the last `n_max` of `total_steps` uniform steps on [0, 1].
    pub total_steps: Option<usize>,
    pub n_max: Option<usize>,
    /// DDIM signal levels, data end first.
    pub alpha_bar: Option<Vec<f64>>,
    /// DDIM cosine grid with this many steps.
    pub ddim_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSection {
    pub tag: String,
    #[serde(default)]
    pub mixture: Option<MixtureSpec>,
    #[serde(default)]
    pub affine: Option<AffineSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineSection {
    pub a: Vec<Vec<f64>>,
    #[serde(default)]
    pub b: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSection {
    pub realizations: Option<usize>,
    pub alphas: Option<Vec<f64>>,
    pub safety: Option<f64>,
    pub seed: Option<u64>,
    /// Condition tags cycled over realizations; defaults to the first condition.
    pub conditions: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub task: Task,
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub methods: Option<Vec<Method>>,
    #[serde(default)]
    pub etas: Vec<f64>,
    #[serde(default)]
    pub eta_factors: Vec<f64>,
    #[serde(default)]
    pub iterations: Option<Vec<usize>>,
    #[serde(default)]
    pub init: Option<Init>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub seed_count: Option<usize>,
    #[serde(default)]
    pub refine_iters: Option<Vec<usize>>,
    #[serde(default)]
    pub jacobian_eta: Option<f64>,
    #[serde(default)]
    pub codec_dim: Option<usize>,
    #[serde(default)]
    pub tolerance: Option<f64>,
    #[serde(default)]
    pub compare_init: bool,
}

/// A fully resolved scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub dim: usize,
    pub backend: VelocityBackend,
    pub solver: Solver,
    /// Full-length grid used to draw source samples when `solver` is truncated.
    pub sample_solver: Solver,
    pub conditions: Vec<Condition>,
    pub bound: BoundConfig,
    pub bound_conditions: Vec<String>,
    pub experiment: Option<ExperimentConfig>,
}

impl Scenario {
    pub fn condition(&self, tag: &str) -> Result<&Condition> {
        self.conditions
            .iter()
            .find(|c| c.tag == tag)
            .ok_or_else(|| Error::Config(format!("unknown condition '{tag}'")))
    }

    /// Chain on the scenario grid under condition `tag`.
    pub fn flow(&self, tag: &str) -> Result<BlackBoxFlow> {
        BlackBoxFlow::new(self.backend, self.solver.clone(), self.condition(tag)?.clone())
    }

    /// Chain on the full-length sampling grid under condition `tag`.
    pub fn sample_flow(&self, tag: &str) -> Result<BlackBoxFlow> {
        BlackBoxFlow::new(self.backend, self.sample_solver.clone(), self.condition(tag)?.clone())
    }

    pub fn default_tag(&self) -> &str {
        &self.conditions[0].tag
    }

    pub fn bound_condition_list(&self) -> Result<Vec<Condition>> {
        self.bound_conditions
            .iter()
            .map(|t| self.condition(t).cloned())
            .collect()
    }
}

pub fn load(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<Scenario> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    resolve(file)
}

fn cfg_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

pub fn resolve(file: ScenarioFile) -> Result<Scenario> {
    if file.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            file.schema_version
        )));
    }
    let backend = VelocityBackend::new(file.backend.kind, file.dim).map_err(cfg_err)?;
    let (solver, sample_solver) = resolve_schedule(&file.schedule, backend.kind)?;

    if file.conditions.is_empty() {
        return Err(Error::Config("at least one condition is required".into()));
    }
    let mut seen = BTreeSet::new();
    let mut conditions = Vec::with_capacity(file.conditions.len());
    for c in &file.conditions {
        if !seen.insert(c.tag.clone()) {
            return Err(Error::Config(format!("duplicate condition tag '{}'", c.tag)));
        }
        let payload = match (&c.mixture, &c.affine) {
            (Some(m), None) => Payload::Mixture(GaussianMixture::new(m.clone()).map_err(cfg_err)?),
            (None, Some(a)) => Payload::Affine(affine_params(a, file.dim)?),
            _ => {
                return Err(Error::Config(format!(
                    "condition '{}' needs exactly one of [mixture] or [affine]",
                    c.tag
                )))
            }
        };
        let cond = Condition::new(c.tag.clone(), payload);
        backend.check_condition(&cond).map_err(cfg_err)?;
        conditions.push(cond);
    }

    let b = file.bound.clone().unwrap_or_default();
    let bound = BoundConfig {
        num_realizations: b.realizations.unwrap_or(DEFAULT_REALIZATIONS),
        alphas: b.alphas.unwrap_or_else(|| DEFAULT_ALPHAS.to_vec()),
        seed: b.seed.unwrap_or(0),
        safety: b.safety.unwrap_or(DEFAULT_SAFETY),
        exec: Default::default(),
    };
    bound.validate().map_err(cfg_err)?;
    let bound_conditions = b
        .conditions
        .unwrap_or_else(|| vec![conditions[0].tag.clone()]);

    let mut scenario = Scenario {
        dim: file.dim,
        backend,
        solver,
        sample_solver,
        conditions,
        bound,
        bound_conditions,
        experiment: None,
    };
    scenario.bound_condition_list()?;
    if let Some(e) = file.experiment {
        scenario.experiment = Some(resolve_experiment(e, &scenario)?);
    }
    Ok(scenario)
}

fn resolve_schedule(s: &ScheduleSection, kind: BackendKind) -> Result<(Solver, Solver)> {
    if kind == BackendKind::DdimNoisePred {
        let sched = match (&s.alpha_bar, s.ddim_steps) {
            (Some(a), None) => DdimSchedule::new(a.clone()),
            (None, Some(n)) => DdimSchedule::cosine(n),
            _ => {
                return Err(Error::Config(
                    "ddim schedule needs exactly one of alpha_bar or ddim_steps".into(),
                ))
            }
        }
        .map_err(cfg_err)?;
        let solver = Solver::Ddim(sched);
        return Ok((solver.clone(), solver));
    }
    if s.alpha_bar.is_some() || s.ddim_steps.is_some() {
        return Err(Error::Config("alpha_bar/ddim_steps need a ddim-noise-pred backend".into()));
    }
    match (s.steps, s.total_steps, s.n_max) {
        (Some(steps), None, None) => {
            let sched = FlowSchedule::uniform(steps, s.t_start.unwrap_or(1.0)).map_err(cfg_err)?;
            Ok((Solver::Euler(sched.clone()), Solver::Euler(sched)))
        }
        (None, Some(total), Some(n_max)) => {
            if s.t_start.is_some() {
                return Err(Error::Config("t_start is implied by total_steps and n_max".into()));
            }
            let trunc = FlowSchedule::truncated(total, n_max).map_err(cfg_err)?;
            let full = FlowSchedule::uniform(total, 1.0).map_err(cfg_err)?;
            Ok((Solver::Euler(trunc), Solver::Euler(full)))
        }
        _ => Err(Error::Config(
            "schedule needs either steps (with optional t_start) or total_steps and n_max".into(),
        )),
    }
}

fn affine_params(a: &AffineSection, dim: usize) -> Result<AffineParams> {
    if a.a.len() != dim || a.a.iter().any(|r| r.len() != dim) {
        return Err(Error::Config(format!("affine matrix must be {dim}x{dim}")));
    }
    let m = DMatrix::from_fn(dim, dim, |i, j| a.a[i][j]);
    let b = match &a.b {
        Some(b) => DVector::from_column_slice(b),
        None => DVector::zeros(dim),
    };
    AffineParams::new(m, b).map_err(cfg_err)
}

fn resolve_experiment(e: ExperimentSection, sc: &Scenario) -> Result<ExperimentConfig> {
    let source = e.source.unwrap_or_else(|| sc.default_tag().to_string());
    sc.condition(&source)?;
    if let Some(t) = &e.target {
        sc.condition(t)?;
    }
    let seeds = match (e.seeds, e.seed_count) {
        (Some(s), None) => s,
        (None, Some(n)) => (0..n as u64).collect(),
        (None, None) => vec![0],
        (Some(_), Some(_)) => {
            return Err(Error::Config("give either seeds or seed_count, not both".into()))
        }
    };
    let cfg = ExperimentConfig {
        task: e.task,
        source,
        target: e.target,
        methods: e.methods.unwrap_or_else(|| e.task.default_methods()),
        etas: e.etas,
        eta_factors: e.eta_factors,
        iterations: e.iterations.unwrap_or_else(|| vec![0, 1, 2, 5, 10, 20]),
        init: e.init.unwrap_or(Init::NaiveOde),
        seeds,
        refine_iters: e.refine_iters.unwrap_or_else(|| vec![1, 2, 4]),
        jacobian_eta: e.jacobian_eta,
        codec_dim: e.codec_dim,
        tolerance: e.tolerance.unwrap_or(1e-6),
        compare_init: e.compare_init,
    };
    cfg.validate(sc)?;
    Ok(cfg)
}
