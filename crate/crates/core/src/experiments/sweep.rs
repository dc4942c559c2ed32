//! Residual curves for a list of step sizes.

use crate::config::Scenario;
use crate::error::{Error, Result};
use crate::par::Exec;

use super::{
    gaussian, initial_state, optimize, per_seed, resolve_etas, rmse, row_rng, CurvePoint, ExperimentConfig,
    ExperimentResult, Method, ResultRow, RunStatus, Task, STREAM_STATE,
};

/// Runs `max(iterations)` iterations per step size and seed without early
/// stopping and classifies each run.
pub fn run_step_size_sweep(sc: &Scenario, cfg: &ExperimentConfig, exec: Exec) -> Result<ExperimentResult> {
    if cfg.task != Task::Sweep {
        return Err(Error::invalid("expected a sweep task"));
    }
    let n = cfg.max_iterations();
    if n == 0 {
        return Err(Error::invalid("sweep needs at least one iteration"));
    }
    let flow = sc.flow(&cfg.source)?;
    let (etas, bound) = resolve_etas(&flow, cfg, &sc.bound, exec)?;
    let parts = per_seed(&cfg.seeds, exec, |seed| {
        let z_true = gaussian(&mut row_rng(seed, STREAM_STATE), sc.dim);
        let y = flow.fork().eval(&z_true)?;
        let mut out = Vec::new();
        for e in &etas {
            let local = flow.fork();
            let z0 = initial_state(&local, cfg.init, &y, seed)?;
            let o = optimize(&local, &y, e.eta, n, &z0, None)?;
            let curve: Vec<CurvePoint> = o
                .residuals
                .iter()
                .enumerate()
                .map(|(iteration, &residual)| CurvePoint {
                    eta: e.eta,
                    eta_factor: e.factor,
                    seed,
                    iteration,
                    residual,
                })
                .collect();
            let row = ResultRow {
                init: Some(cfg.init),
                eta: Some(e.eta),
                eta_factor: e.factor,
                iterations: n,
                steps: flow.num_steps(),
                nfe: local.nfe(),
                rmse: rmse(&o.output, &y),
                status: RunStatus::classify(&o.residuals, o.aborted, cfg.tolerance),
                ..ResultRow::base(Task::Sweep, Method::FlowOpt, seed)
            };
            out.push((row, curve));
        }
        Ok(out)
    })?;
    let mut rows = Vec::with_capacity(parts.len());
    let mut curves = Vec::new();
    for (row, curve) in parts {
        rows.push(row);
        curves.extend(curve);
    }
    Ok(ExperimentResult {
        task: Task::Sweep,
        rows,
        curves,
        bound,
    })
}
