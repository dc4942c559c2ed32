//! Direct editing: optimize the starting state under the target condition so
//! the edited sample stays close to a source sample.

use serde::{Deserialize, Serialize};

use crate::config::Scenario;
use crate::error::{Error, Result};
use crate::flow::BlackBoxFlow;
use crate::mixture::GaussianMixture;
use crate::par::Exec;
use crate::State;

use super::{
    gaussian, optimize, per_seed, resolve_etas, rmse, row_rng, ExperimentConfig, ExperimentResult, Init, Method,
    ResultRow, RunStatus, Task, STREAM_STATE,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    /// RMSE between the edited sample and the source sample; lower is closer.
    pub source_similarity: f64,
    /// Log-density of the edited sample under the target mixture.
    pub target_adherence: f64,
}

pub fn edit_metrics(y_edit: &State, y: &State, target: &GaussianMixture) -> Result<EditMetrics> {
    Error::check_dim(y.len(), y_edit.len())?;
    Ok(EditMetrics {
        source_similarity: rmse(y_edit, y),
        target_adherence: target.log_density(y_edit)?,
    })
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub z: State,
    pub y_edit: State,
    /// Residual `||f(z^i, c_tar) - y||` per iterate.
    pub residuals: Vec<f64>,
    pub diverged: bool,
    pub nfe: u64,
}

/// Starts from the naive inversion of `y` under `src` and runs `n` iterations
/// under `tar`. Identical conditions are allowed here and give a plain
/// reconstruction.
pub fn direct_edit(src: &BlackBoxFlow, tar: &BlackBoxFlow, y: &State, eta: f64, n: usize) -> Result<EditOutcome> {
    let src_local = src.fork();
    let tar_local = tar.fork();
    let z0 = src_local.invert_naive(y)?;
    let o = optimize(&tar_local, y, eta, n, &z0, None)?;
    let nfe = src_local.nfe() + tar_local.nfe();
    src.add_nfe(src_local.nfe());
    tar.add_nfe(tar_local.nfe());
    Ok(EditOutcome {
        z: o.iterate,
        y_edit: o.output,
        residuals: o.residuals,
        diverged: o.aborted,
        nfe,
    })
}

/// Draws `y` from the full-length source chain, then edits it on the
/// scenario grid for every step size and `N`.
pub fn run_editing_experiment(sc: &Scenario, cfg: &ExperimentConfig, exec: Exec) -> Result<ExperimentResult> {
    if cfg.task != Task::DirectEdit {
        return Err(Error::invalid("expected a direct-edit task"));
    }
    let tar_tag = cfg
        .target
        .as_deref()
        .ok_or_else(|| Error::invalid("direct-edit needs a target condition"))?;
    if tar_tag == cfg.source {
        return Err(Error::invalid("direct-edit needs distinct source and target conditions"));
    }
    let sampler = sc.sample_flow(&cfg.source)?;
    let src = sc.flow(&cfg.source)?;
    let tar = sc.flow(tar_tag)?;
    let mixture = tar
        .condition()
        .as_mixture()
        .ok_or_else(|| Error::invalid("direct-edit scores adherence with a mixture density"))?
        .clone();
    let (etas, bound) = resolve_etas(&tar, cfg, &sc.bound, exec)?;

    let rows = per_seed(&cfg.seeds, exec, |seed| {
        let z1 = gaussian(&mut row_rng(seed, STREAM_STATE), sc.dim);
        let y = sampler.fork().eval(&z1)?;
        let mut rows = Vec::new();
        for e in &etas {
            for &n in &cfg.iterations {
                let out = direct_edit(&src, &tar, &y, e.eta, n)?;
                let m = edit_metrics(&out.y_edit, &y, &mixture)?;
                rows.push(ResultRow {
                    init: Some(Init::NaiveOde),
                    eta: Some(e.eta),
                    eta_factor: e.factor,
                    iterations: n,
                    steps: tar.num_steps(),
                    nfe: out.nfe,
                    rmse: m.source_similarity,
                    source_similarity: Some(m.source_similarity),
                    target_adherence: Some(m.target_adherence),
                    status: RunStatus::classify(&out.residuals, out.diverged, cfg.tolerance),
                    ..ResultRow::base(Task::DirectEdit, Method::FlowOpt, seed)
                });
            }
        }
        Ok(rows)
    })?;
    Ok(ExperimentResult {
        task: Task::DirectEdit,
        rows,
        curves: Vec::new(),
        bound,
    })
}
