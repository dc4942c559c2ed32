//! Reconstruction error against evaluation budget.
//!
//! FlowOpt with `N` iterations costs `T(N+2)` evaluations from a naive start.
//! The baselines get the same budget spent on a finer grid: naive inversion
//! plus regeneration on `T(N+2)/2` steps, and fixed-point inversion with `r`
//! sweeps plus regeneration on `T(N+2)/(r+1)` steps.

use crate::baselines::{invert_fixed_point, jacobian_gd, FixedPointInversionConfig, JacobianGDConfig};
use crate::config::Scenario;
use crate::error::{Error, Result};
use crate::flow::{BlackBoxFlow, Solver};
use crate::par::Exec;
use crate::schedule::FlowSchedule;
use crate::State;

use super::codec::LinearCodec;
use super::{
    gaussian, initial_state, optimize, per_seed, resolve_etas, rmse, row_rng, EtaChoice, ExperimentConfig,
    ExperimentResult, Init, Method, ResultRow, RunStatus, Task, STREAM_CODEC, STREAM_STATE,
};

/// Finite-difference step for the Jacobian baseline, a power of two.
const JACOBIAN_FD_STEP: f64 = 1.0 / 131072.0;

pub fn run_inversion_experiment(sc: &Scenario, cfg: &ExperimentConfig, exec: Exec) -> Result<ExperimentResult> {
    if cfg.task != Task::Inversion {
        return Err(Error::invalid("expected an inversion task"));
    }
    let flow = sc.flow(&cfg.source)?;
    let (etas, bound) = resolve_etas(&flow, cfg, &sc.bound, exec)?;
    let rows = per_seed(&cfg.seeds, exec, |seed| seed_rows(&flow, cfg, &etas, seed))?;
    Ok(ExperimentResult {
        task: Task::Inversion,
        rows,
        curves: Vec::new(),
        bound,
    })
}

/// Same chain on a uniform grid of `steps` steps over the same time span.
fn regrid(flow: &BlackBoxFlow, steps: usize) -> Result<BlackBoxFlow> {
    match flow.solver() {
        Solver::Euler(s) => BlackBoxFlow::euler(
            *flow.backend(),
            FlowSchedule::uniform(steps.max(1), s.t_start())?,
            flow.condition().clone(),
        ),
        Solver::Ddim(_) => Err(Error::invalid("baselines at a matched budget need an Euler grid")),
    }
}

struct Target {
    y: State,
    signal: State,
    codec: Option<LinearCodec>,
}

impl Target {
    fn score(&self, row: &mut ResultRow, out: &State) -> Result<()> {
        row.rmse = rmse(out, &self.y);
        if let Some(c) = &self.codec {
            row.rmse_signal = Some(rmse(&c.roundtrip(out)?, &self.signal));
            row.floor = Some(rmse(&self.y, &self.signal));
        }
        Ok(())
    }
}

fn seed_rows(flow: &BlackBoxFlow, cfg: &ExperimentConfig, etas: &[EtaChoice], seed: u64) -> Result<Vec<ResultRow>> {
    let dim = flow.dim();
    let steps = flow.num_steps();
    let z_true = gaussian(&mut row_rng(seed, STREAM_STATE), dim);
    let signal = flow.fork().eval(&z_true)?;
    let target = match cfg.codec_dim {
        Some(k) => {
            let codec = LinearCodec::random(dim, k, &mut row_rng(seed, STREAM_CODEC))?;
            Target {
                y: codec.roundtrip(&signal)?,
                signal,
                codec: Some(codec),
            }
        }
        None => Target {
            y: signal.clone(),
            signal,
            codec: None,
        },
    };
    let y = &target.y;
    let base = ResultRow::base(Task::Inversion, Method::FlowOpt, seed);
    let mut rows = Vec::new();

    for &method in &cfg.methods {
        match method {
            Method::FlowOpt => {
                for e in etas {
                    for &n in &cfg.iterations {
                        let local = flow.fork();
                        let z0 = initial_state(&local, cfg.init, y, seed)?;
                        let o = optimize(&local, y, e.eta, n, &z0, None)?;
                        let mut row = ResultRow {
                            init: Some(cfg.init),
                            eta: Some(e.eta),
                            eta_factor: e.factor,
                            iterations: n,
                            steps,
                            nfe: local.nfe(),
                            status: RunStatus::classify(&o.residuals, o.aborted, cfg.tolerance),
                            ..base.clone()
                        };
                        target.score(&mut row, &o.output)?;
                        rows.push(row);
                    }
                }
            }
            Method::NaiveOde => {
                for &n in &cfg.iterations {
                    let budget = steps * (n + 2);
                    let fine = regrid(flow, budget / 2)?;
                    let z = fine.invert_naive(y)?;
                    let out = fine.eval(&z)?;
                    let mut row = ResultRow {
                        method,
                        iterations: n,
                        steps: fine.num_steps(),
                        nfe: fine.nfe(),
                        ..base.clone()
                    };
                    target.score(&mut row, &out)?;
                    row.status = status_of(&row, cfg.tolerance, dim);
                    rows.push(row);
                }
            }
            Method::FixedPoint => {
                for &r in &cfg.refine_iters {
                    let fp = FixedPointInversionConfig::new(r)?;
                    for &n in &cfg.iterations {
                        let budget = steps * (n + 2);
                        let fine = regrid(flow, budget / (r + 1))?;
                        let z = invert_fixed_point(&fine, y, &fp)?;
                        let out = fine.eval(&z)?;
                        let mut row = ResultRow {
                            method,
                            iterations: n,
                            refine_iters: Some(r),
                            steps: fine.num_steps(),
                            nfe: fine.nfe(),
                            ..base.clone()
                        };
                        target.score(&mut row, &out)?;
                        row.status = status_of(&row, cfg.tolerance, dim);
                        rows.push(row);
                    }
                }
            }
            Method::JacobianGd => {
                let eta = cfg.jacobian_eta.ok_or_else(|| Error::invalid("jacobian-gd needs jacobian_eta"))?;
                for &n in &cfg.iterations {
                    let local = flow.fork();
                    let z0 = initial_state(&local, cfg.init, y, seed)?;
                    let (out, residuals, aborted) = if n == 0 {
                        let out = local.eval(&z0)?;
                        let r = (&out - y).norm();
                        (out, vec![r], false)
                    } else {
                        let jcfg = JacobianGDConfig {
                            eta,
                            max_iters: n,
                            fd_step: JACOBIAN_FD_STEP,
                            stop_tol: None,
                        };
                        match jacobian_gd(&local, y, &jcfg, &z0) {
                            Ok(t) => (t.final_output().cloned().unwrap_or(z0), t.residual_norms, false),
                            Err(Error::Divergence { trace, .. }) => {
                                let out = trace.final_output().cloned().unwrap_or(z0);
                                (out, trace.residual_norms, true)
                            }
                            Err(e) => return Err(e),
                        }
                    };
                    let mut row = ResultRow {
                        method,
                        init: Some(cfg.init),
                        eta: Some(eta),
                        iterations: n,
                        steps,
                        nfe: local.nfe(),
                        status: RunStatus::classify(&residuals, aborted, cfg.tolerance),
                        ..base.clone()
                    };
                    target.score(&mut row, &out)?;
                    rows.push(row);
                }
            }
        }
    }

    if cfg.compare_init {
        let max_n = cfg.max_iterations();
        if max_n > 0 {
            for e in etas {
                for init in [Init::NaiveOde, Init::Random] {
                    let local = flow.fork();
                    let z0 = initial_state(&local, init, y, seed)?;
                    let o = optimize(&local, y, e.eta, max_n, &z0, Some(cfg.tolerance))?;
                    let reached = o.residuals.iter().position(|&r| r <= cfg.tolerance);
                    let mut row = ResultRow {
                        init: Some(init),
                        eta: Some(e.eta),
                        eta_factor: e.factor,
                        iterations: max_n,
                        stop_tol: Some(cfg.tolerance),
                        steps,
                        nfe: local.nfe(),
                        iterations_to_tol: reached,
                        status: RunStatus::classify(&o.residuals, o.aborted, cfg.tolerance),
                        ..base.clone()
                    };
                    target.score(&mut row, &o.output)?;
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

fn status_of(row: &ResultRow, tol: f64, dim: usize) -> RunStatus {
    let residual = row.rmse * (dim as f64).sqrt();
    if !residual.is_finite() {
        RunStatus::Diverged
    } else if residual < tol {
        RunStatus::Converged
    } else {
        RunStatus::Stalled
    }
}
