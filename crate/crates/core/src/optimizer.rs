//! Zero-order fixed-point iterations on the black-box chain.
//!
//! Each iteration evaluates `f` once and moves the starting state against the
//! output residual: `z <- z - eta * delta_scale * (f(z) - y)`. No Jacobian of
//! `f` is ever formed.

use std::fmt::Write as _;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::BlackBoxFlow;
use crate::State;

/// A run aborts once the residual exceeds this multiple of the initial one.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub eta: f64,
    pub max_iters: usize,
    /// Stop as soon as the residual norm drops to this value. `None` runs all
    /// `max_iters` iterations.
    pub stop_tol: Option<f64>,
    /// 1 for flows, `1 / sqrt(alpha_T)` for DDIM chains.
    pub delta_scale: f64,
}

impl OptConfig {
    pub fn new(eta: f64, max_iters: usize) -> Result<Self> {
        let cfg = Self {
            eta,
            max_iters,
            stop_tol: None,
            delta_scale: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_stop_tol(mut self, tol: f64) -> Result<Self> {
        self.stop_tol = Some(tol);
        self.validate()?;
        Ok(self)
    }

    pub fn with_delta_scale(mut self, delta: f64) -> Result<Self> {
        self.delta_scale = delta;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("step size must be positive, got {}", self.eta)));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.delta_scale > 0.0 && self.delta_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "delta_scale must be positive, got {}",
                self.delta_scale
            )));
        }
        if let Some(tol) = self.stop_tol {
            if !(tol >= 0.0) {
                return Err(Error::invalid(format!("stop_tol must be nonnegative, got {tol}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptTrace {
    pub target: State,
    /// Starting states `z^(i)`.
    pub iterates: Vec<State>,
    /// Chain outputs `f(z^(i))`.
    pub outputs: Vec<State>,
    pub residual_norms: Vec<f64>,
    pub nfe_total: u64,
    pub stopped_early_at: Option<usize>,
}

impl OptTrace {
    fn new(target: &State) -> Self {
        Self {
            target: target.clone(),
            iterates: Vec::new(),
            outputs: Vec::new(),
            residual_norms: Vec::new(),
            nfe_total: 0,
            stopped_early_at: None,
        }
    }

    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    /// Number of update steps taken.
    pub fn iterations_run(&self) -> usize {
        self.len().saturating_sub(1)
    }

    pub fn final_residual(&self) -> Option<f64> {
        self.residual_norms.last().copied()
    }

    pub fn final_iterate(&self) -> Option<&State> {
        self.iterates.last()
    }

    pub fn final_output(&self) -> Option<&State> {
        self.outputs.last()
    }

    /// Per-iteration rows: `iteration,residual[,z_0..][,out_0..]`, preceded by
    /// a schema comment line.
    pub fn to_csv(&self, with_states: bool) -> String {
        let d = self.target.len();
        let mut s = String::from("# flowopt-trace schema_version=1\niteration,residual");
        if with_states {
            for i in 0..d {
                let _ = write!(s, ",z_{i}");
            }
            for i in 0..d {
                let _ = write!(s, ",out_{i}");
            }
        }
        s.push('\n');
        for (i, r) in self.residual_norms.iter().enumerate() {
            let _ = write!(s, "{i},{r:e}");
            if with_states {
                for v in self.iterates[i].iter().chain(self.outputs[i].iter()) {
                    let _ = write!(s, ",{v:e}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_record(&self, config: Option<OptConfig>, num_steps: usize) -> TraceRecord {
        TraceRecord {
            schema_version: 1,
            config,
            num_steps,
            nfe_total: self.nfe_total,
            stopped_early_at: self.stopped_early_at,
            target: self.target.iter().copied().collect(),
            iterates: self.iterates.iter().map(|z| z.iter().copied().collect()).collect(),
            outputs: self.outputs.iter().map(|z| z.iter().copied().collect()).collect(),
            residual_norms: self.residual_norms.clone(),
        }
    }
}

/// JSON form of a trace with the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub schema_version: u32,
    pub config: Option<OptConfig>,
    pub num_steps: usize,
    pub nfe_total: u64,
    pub stopped_early_at: Option<usize>,
    pub target: Vec<f64>,
    pub iterates: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub residual_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossSpec {
    /// `1/2 ||f - y||^2`
    SquaredL2,
    /// `1/2 sum_i w_i (f_i - y_i)^2`
    WeightedSquaredL2 { weights: Vec<f64> },
    /// Per-coordinate Huber loss with the given threshold.
    Huber { threshold: f64 },
}

impl LossSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            LossSpec::SquaredL2 => Ok(()),
            LossSpec::WeightedSquaredL2 { weights } => {
                Error::check_dim(dim, weights.len())?;
                if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                    return Err(Error::invalid("loss weights must be finite and nonnegative"));
                }
                Ok(())
            }
            LossSpec::Huber { threshold } => {
                if !(*threshold > 0.0) {
                    return Err(Error::invalid("huber threshold must be positive"));
                }
                Ok(())
            }
        }
    }

    pub fn value(&self, f: &State, y: &State) -> f64 {
        let r = f - y;
        match self {
            LossSpec::SquaredL2 => 0.5 * r.norm_squared(),
            LossSpec::WeightedSquaredL2 { weights } => {
                0.5 * r.iter().zip(weights).map(|(r, w)| w * r * r).sum::<f64>()
            }
            LossSpec::Huber { threshold } => r
                .iter()
                .map(|r| {
                    if r.abs() <= *threshold {
                        0.5 * r * r
                    } else {
                        threshold * (r.abs() - 0.5 * threshold)
                    }
                })
                .sum(),
        }
    }

    /// Gradient of the loss with respect to the chain output.
    pub fn gradient(&self, f: &State, y: &State) -> State {
        let r = f - y;
        match self {
            LossSpec::SquaredL2 => r,
            LossSpec::WeightedSquaredL2 { weights } => {
                DVector::from_iterator(r.len(), r.iter().zip(weights).map(|(r, w)| w * r))
            }
            LossSpec::Huber { threshold } => r.map(|r| r.clamp(-threshold, *threshold)),
        }
    }
}

fn iterate<G>(flow: &BlackBoxFlow, y: &State, cfg: &OptConfig, z_init: &State, grad: G) -> Result<OptTrace>
where
    G: Fn(&State, &State) -> State,
{
    cfg.validate()?;
    Error::check_dim(flow.dim(), y.len())?;
    Error::check_dim(flow.dim(), z_init.len())?;

    let local = flow.fork();
    let step = cfg.eta * cfg.delta_scale;
    let mut trace = OptTrace::new(y);
    let mut z = z_init.clone();
    let mut initial = None;

    let mut diverged = None;
    let mut failure = None;
    for i in 0..=cfg.max_iters {
        let out = match local.eval(&z) {
            Ok(out) => out,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        let residual = (&out - y).norm();
        let r0 = *initial.get_or_insert(residual);
        let blown = !residual.is_finite()
            || z.iter().any(|v| !v.is_finite())
            || (r0 > 0.0 && residual > DIVERGENCE_FACTOR * r0);
        trace.iterates.push(z.clone());
        trace.outputs.push(out.clone());
        trace.residual_norms.push(residual);
        if blown {
            diverged = Some((i, residual));
            break;
        }
        if i == cfg.max_iters {
            break;
        }
        if cfg.stop_tol.is_some_and(|tol| residual <= tol) {
            trace.stopped_early_at = Some(i);
            break;
        }
        z = &z - grad(&out, y) * step;
    }

    trace.nfe_total = local.nfe();
    flow.add_nfe(local.nfe());
    if let Some(e) = failure {
        return Err(e);
    }
    match diverged {
        None => Ok(trace),
        Some((iteration, residual)) => Err(Error::Divergence {
            iteration,
            residual,
            trace: Box::new(trace),
        }),
    }
}

/// Zero-order iterations on the squared residual.
pub fn flowopt_run(flow: &BlackBoxFlow, y: &State, cfg: &OptConfig, z_init: &State) -> Result<OptTrace> {
    iterate(flow, y, cfg, z_init, |out, y| out - y)
}

/// Zero-order iterations driven by the gradient of `loss` with respect to the
/// chain output.
pub fn flowopt_general(
    flow: &BlackBoxFlow,
    y: &State,
    cfg: &OptConfig,
    z_init: &State,
    loss: &LossSpec,
) -> Result<OptTrace> {
    loss.validate(flow.dim())?;
    iterate(flow, y, cfg, z_init, |out, y| loss.gradient(out, y))
}

/// Finite-difference step for the stop-grad check, rounded to a power of two.
fn fd_step(z: &State) -> f64 {
    let raw = 1e-4 * (1.0 + z.amax());
    2f64.powi(raw.log2().round() as i32)
}

/// Central-difference gradient of `1/2 ||f(z) - y||^2` with every backend
/// output frozen at its forward value, compared against the zero-order
/// direction `delta_scale * (f(z) - y)`. Returns the largest absolute gap.
pub fn stopgrad_equivalence_check(flow: &BlackBoxFlow, z: &State, y: &State) -> Result<f64> {
    Error::check_dim(flow.dim(), y.len())?;
    let (out, frozen) = flow.eval_frozen(z)?;
    let expected = (&out - y) * frozen.scale;
    let h = fd_step(z);
    let mut worst: f64 = 0.0;
    for i in 0..z.len() {
        let mut plus = z.clone();
        plus[i] += h;
        let mut minus = z.clone();
        minus[i] -= h;
        let ep = frozen.apply(&plus) - y;
        let em = frozen.apply(&minus) - y;
        // 1/2 (|ep|^2 - |em|^2), summed as a difference of squares per coordinate.
        let dl: f64 = ep.iter().zip(em.iter()).map(|(a, b)| (a - b) * (a + b)).sum::<f64>() * 0.5;
        let g = dl / (2.0 * h);
        worst = worst.max((g - expected[i]).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopCriterion {
    /// First entry whose residual is at most this value.
    Residual(f64),
    /// A fixed entry, clamped to the trace length.
    Index(usize),
}

/// Picks `(index, iterate, output)` from a trace.
pub fn early_stop_select(trace: &OptTrace, criterion: StopCriterion) -> Result<(usize, &State, &State)> {
    if trace.is_empty() {
        return Err(Error::invalid("cannot select from an empty trace"));
    }
    let last = trace.len() - 1;
    let idx = match criterion {
        StopCriterion::Residual(tol) => trace
            .residual_norms
            .iter()
            .position(|r| *r <= tol)
            .unwrap_or(last),
        StopCriterion::Index(i) => i.min(last),
    };
    Ok((idx, &trace.iterates[idx], &trace.outputs[idx]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{AffineParams, BackendKind, Condition, VelocityBackend};
    use crate::schedule::FlowSchedule;

    fn scalar_flow(a: f64, steps: usize) -> BlackBoxFlow {
        BlackBoxFlow::euler(
            VelocityBackend::new(BackendKind::Affine, 1).unwrap(),
            FlowSchedule::uniform(steps, 1.0).unwrap(),
            Condition::affine("s", AffineParams::scaled_identity(1, a)),
        )
        .unwrap()
    }

    fn s(x: f64) -> State {
        DVector::from_element(1, x)
    }

    #[test]
    fn identity_map_halves_residual() {
        let f = scalar_flow(0.0, 4);
        let cfg = OptConfig::new(0.5, 3).unwrap();
        let tr = flowopt_run(&f, &s(1.0), &cfg, &s(0.0)).unwrap();
        let its: Vec<f64> = tr.iterates.iter().map(|z| z[0]).collect();
        assert_eq!(its, vec![0.0, 0.5, 0.75, 0.875]);
        assert_eq!(tr.residual_norms, vec![1.0, 0.5, 0.25, 0.125]);
        assert_eq!(tr.nfe_total, 4 * 4);
        assert_eq!(f.nfe(), 16);
    }

    #[test]
    fn linear_rate_matches_closed_form() {
        let f = scalar_flow(1.0, 10);
        let m = 0.9f64.powi(10);
        let eta = 2.0 / m * 0.45;
        let cfg = OptConfig::new(eta, 3).unwrap();
        let tr = flowopt_run(&f, &s(m), &cfg, &s(0.0)).unwrap();
        for w in tr.residual_norms.windows(2) {
            assert!((w[1] / w[0] - 0.1).abs() < 1e-10, "{}", w[1] / w[0]);
        }
    }

    #[test]
    fn oversized_step_grows() {
        let f = scalar_flow(1.0, 10);
        let m = 0.9f64.powi(10);
        let cfg = OptConfig::new(2.2 / m, 200).unwrap();
        match flowopt_run(&f, &s(m), &cfg, &s(0.0)) {
            Err(Error::Divergence { trace, .. }) => {
                assert!(trace.final_residual().unwrap() > trace.residual_norms[0]);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        let cfg = OptConfig::new(2.2 / m, 5).unwrap();
        let tr = flowopt_run(&f, &s(m), &cfg, &s(0.0)).unwrap();
        assert!(tr.final_residual().unwrap() > tr.residual_norms[0]);
    }

    #[test]
    fn stop_tol_cuts_the_run() {
        let f = scalar_flow(0.0, 3);
        let cfg = OptConfig::new(0.5, 50).unwrap().with_stop_tol(0.3).unwrap();
        let tr = flowopt_run(&f, &s(1.0), &cfg, &s(0.0)).unwrap();
        assert_eq!(tr.stopped_early_at, Some(2));
        assert_eq!(tr.len(), 3);
        assert_eq!(tr.nfe_total, 3 * 3);
    }

    #[test]
    fn config_validation() {
        assert!(OptConfig::new(0.0, 3).is_err());
        assert!(OptConfig::new(-1.0, 3).is_err());
        assert!(OptConfig::new(0.1, 0).is_err());
        assert!(OptConfig::new(0.1, 1).unwrap().with_delta_scale(0.0).is_err());
        assert!(OptConfig::new(0.1, 1).unwrap().with_stop_tol(-1.0).is_err());
    }

    #[test]
    fn early_stop_selection() {
        let f = scalar_flow(0.0, 2);
        let cfg = OptConfig::new(0.5, 3).unwrap();
        let tr = flowopt_run(&f, &s(1.0), &cfg, &s(0.0)).unwrap();
        assert_eq!(early_stop_select(&tr, StopCriterion::Residual(2.0)).unwrap().0, 0);
        assert_eq!(early_stop_select(&tr, StopCriterion::Residual(0.0)).unwrap().0, 3);
        let (i, z, _) = early_stop_select(&tr, StopCriterion::Residual(0.3)).unwrap();
        assert_eq!((i, z[0]), (2, 0.75));
        assert_eq!(early_stop_select(&tr, StopCriterion::Index(10)).unwrap().0, 3);
        let empty = OptTrace::new(&s(0.0));
        assert!(early_stop_select(&empty, StopCriterion::Index(0)).is_err());
    }

    #[test]
    fn huber_gradient_inside_and_outside() {
        let loss = LossSpec::Huber { threshold: 1.0 };
        let f = DVector::from_vec(vec![0.5, 3.0, -2.0]);
        let y = DVector::zeros(3);
        assert_eq!(loss.gradient(&f, &y), DVector::from_vec(vec![0.5, 1.0, -1.0]));
        assert!((loss.value(&f, &y) - (0.125 + 2.5 + 1.5)).abs() < 1e-15);
    }

    #[test]
    fn stopgrad_zero_field_is_exact() {
        let f = BlackBoxFlow::euler(
            VelocityBackend::new(BackendKind::Affine, 3).unwrap(),
            FlowSchedule::uniform(5, 1.0).unwrap(),
            Condition::affine("z", AffineParams::zero(3)),
        )
        .unwrap();
        let z = DVector::from_vec(vec![0.5, -1.25, 2.0]);
        let y = DVector::from_vec(vec![1.0, 0.25, -0.75]);
        assert_eq!(stopgrad_equivalence_check(&f, &z, &y).unwrap(), 0.0);
    }

    #[test]
    fn csv_has_schema_line_and_rows() {
        let f = scalar_flow(0.0, 2);
        let tr = flowopt_run(&f, &s(1.0), &OptConfig::new(0.5, 2).unwrap(), &s(0.0)).unwrap();
        let csv = tr.to_csv(true);
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# flowopt-trace"));
        assert_eq!(lines[1], "iteration,residual,z_0,out_0");
        assert_eq!(lines.len(), 2 + 3);
    }
}
