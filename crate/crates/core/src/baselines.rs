//! Comparison methods.
//!
//! * [`invert_fixed_point`] inverts each Euler step by solving the implicit
//!   relation `z_k = z_{k+1} - v(z_k, t_k) dt` with a few fixed-point sweeps,
//!   warm-started from the naive step. A generic stand-in for per-timestep
//!   refinement schemes.
//! * [`jacobian_gd`] is gradient descent on `1/2 ||f(z) - y||^2` with the
//!   gradient taken by central differences through the whole chain. It costs
//!   `2d` chain passes per gradient and is capped at `d <= 8`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::BlackBoxFlow;
use crate::optimizer::{OptTrace, DIVERGENCE_FACTOR};
use crate::State;

pub const JACOBIAN_MAX_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointInversionConfig {
    pub refine_iters: usize,
}

impl FixedPointInversionConfig {
    pub fn new(refine_iters: usize) -> Result<Self> {
        if refine_iters == 0 {
            return Err(Error::invalid("refine_iters must be at least 1"));
        }
        Ok(Self { refine_iters })
    }
}

/// Inverts an Euler chain step by step. Uses `num_steps * refine_iters`
/// backend evaluations; with `refine_iters = 1` it is the naive inversion.
pub fn invert_fixed_point(flow: &BlackBoxFlow, z0: &State, cfg: &FixedPointInversionConfig) -> Result<State> {
    if cfg.refine_iters == 0 {
        return Err(Error::invalid("refine_iters must be at least 1"));
    }
    Error::check_dim(flow.dim(), z0.len())?;
    let (times, dt) = flow.euler_times()?;
    let steps = times.len() - 1;
    let mut z = z0.clone();
    for k in (0..steps).rev() {
        let v = flow.velocity(&z, times[k + 1])?;
        let mut guess = &z - v * dt;
        for _ in 1..cfg.refine_iters {
            let v = flow.velocity(&guess, times[k])?;
            guess = &z - v * dt;
        }
        z = guess;
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianGDConfig {
    pub eta: f64,
    pub max_iters: usize,
    pub fd_step: f64,
    #[serde(default)]
    pub stop_tol: Option<f64>,
}

impl JacobianGDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("step size must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::invalid("fd_step must be positive"));
        }
        Ok(())
    }
}

/// Central-difference gradient of `1/2 ||f(z) - y||^2`; `2d` chain passes.
pub fn fd_loss_gradient(flow: &BlackBoxFlow, z: &State, y: &State, h: f64) -> Result<State> {
    let mut grad = State::zeros(z.len());
    for i in 0..z.len() {
        let mut plus = z.clone();
        plus[i] += h;
        let mut minus = z.clone();
        minus[i] -= h;
        let ep = flow.eval(&plus)? - y;
        let em = flow.eval(&minus)? - y;
        let dl: f64 = ep.iter().zip(em.iter()).map(|(a, b)| (a - b) * (a + b)).sum::<f64>() * 0.5;
        grad[i] = dl / (plus[i] - minus[i]);
    }
    Ok(grad)
}

/// Gradient descent through the chain with a finite-difference Jacobian.
pub fn jacobian_gd(flow: &BlackBoxFlow, y: &State, cfg: &JacobianGDConfig, z_init: &State) -> Result<OptTrace> {
    cfg.validate()?;
    let d = flow.dim();
    if d > JACOBIAN_MAX_DIM {
        return Err(Error::invalid(format!(
            "finite-difference oracle is limited to d <= {JACOBIAN_MAX_DIM}, got {d}"
        )));
    }
    Error::check_dim(d, y.len())?;
    Error::check_dim(d, z_init.len())?;

    let local = flow.fork();
    let mut trace = OptTrace {
        target: y.clone(),
        iterates: Vec::new(),
        outputs: Vec::new(),
        residual_norms: Vec::new(),
        nfe_total: 0,
        stopped_early_at: None,
    };
    let mut z = z_init.clone();
    let mut diverged = None;
    let mut failure = None;
    for i in 0..=cfg.max_iters {
        let out = match local.eval(&z) {
            Ok(o) => o,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        let residual = (&out - y).norm();
        let r0 = trace.residual_norms.first().copied().unwrap_or(residual);
        let blown = !residual.is_finite() || (r0 > 0.0 && residual > DIVERGENCE_FACTOR * r0);
        trace.iterates.push(z.clone());
        trace.outputs.push(out);
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
        match fd_loss_gradient(&local, &z, y, cfg.fd_step) {
            Ok(g) => z = &z - g * cfg.eta,
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{AffineParams, BackendKind, Condition, VelocityBackend};
    use crate::optimizer::{flowopt_run, OptConfig};
    use crate::schedule::FlowSchedule;
    use nalgebra::{DMatrix, DVector};

    fn affine(dim: usize, a: DMatrix<f64>, b: DVector<f64>, steps: usize) -> BlackBoxFlow {
        BlackBoxFlow::euler(
            VelocityBackend::new(BackendKind::Affine, dim).unwrap(),
            FlowSchedule::uniform(steps, 1.0).unwrap(),
            Condition::affine("a", AffineParams::new(a, b).unwrap()),
        )
        .unwrap()
    }

    #[test]
    fn zero_field_single_iteration() {
        let f = affine(2, DMatrix::zeros(2, 2), DVector::zeros(2), 5);
        let z = DVector::from_vec(vec![0.4, -0.2]);
        let cfg = FixedPointInversionConfig::new(1).unwrap();
        assert_eq!(invert_fixed_point(&f, &z, &cfg).unwrap(), z);
        assert_eq!(f.nfe(), 5);
    }

    #[test]
    fn single_refinement_is_naive() {
        let a = DMatrix::from_row_slice(2, 2, &[0.8, 0.1, 0.1, 0.3]);
        let f = affine(2, a, DVector::from_vec(vec![0.2, -0.1]), 10);
        let z0 = DVector::from_vec(vec![1.1, -0.7]);
        let cfg = FixedPointInversionConfig::new(1).unwrap();
        assert_eq!(invert_fixed_point(&f, &z0, &cfg).unwrap(), f.invert_naive(&z0).unwrap());
    }

    #[test]
    fn refinement_reduces_reconstruction_error() {
        let f = affine(1, DMatrix::from_element(1, 1, 1.0), DVector::zeros(1), 10);
        let z0 = DVector::from_element(1, 0.7);
        let mut last = f64::INFINITY;
        for k in 1..=4 {
            let cfg = FixedPointInversionConfig::new(k).unwrap();
            let before = f.nfe();
            let z = invert_fixed_point(&f, &z0, &cfg).unwrap();
            assert_eq!(f.nfe() - before, 10 * k as u64);
            let err = (f.eval(&z).unwrap() - &z0).norm();
            assert!(err < last, "refine {k}: {err} !< {last}");
            last = err;
        }
        assert!(FixedPointInversionConfig::new(0).is_err());
    }

    #[test]
    fn identity_flow_gradient_is_residual() {
        let f = affine(3, DMatrix::zeros(3, 3), DVector::zeros(3), 2);
        let z = DVector::from_vec(vec![0.5, 1.0, -2.0]);
        let y = DVector::from_vec(vec![0.0, 0.25, 1.0]);
        let g = fd_loss_gradient(&f, &z, &y, 1e-4).unwrap();
        assert!((g - (&z - &y)).amax() < 1e-10);
    }

    #[test]
    fn dimension_cap() {
        let f = affine(9, DMatrix::zeros(9, 9), DVector::zeros(9), 1);
        let cfg = JacobianGDConfig { eta: 0.1, max_iters: 1, fd_step: 1e-4, stop_tol: None };
        let z = DVector::zeros(9);
        assert!(jacobian_gd(&f, &z, &cfg, &z).is_err());
    }

    #[test]
    fn per_iteration_cost() {
        let f = affine(4, DMatrix::identity(4, 4) * 0.5, DVector::zeros(4), 10);
        let y = DVector::from_element(4, 0.3);
        let z = DVector::zeros(4);
        let cfg = JacobianGDConfig { eta: 0.5, max_iters: 3, fd_step: 1e-4, stop_tol: None };
        let jt = jacobian_gd(&f, &y, &cfg, &z).unwrap();
        let ft = flowopt_run(&f, &y, &OptConfig::new(0.5, 3).unwrap(), &z).unwrap();
        assert_eq!(ft.nfe_total, 10 * 4);
        assert_eq!(jt.nfe_total, 10 * (4 + 3 * 8));
        let per_jgd = (jt.nfe_total - 10) / 3;
        let per_fo = (ft.nfe_total - 10) / 3;
        assert!(per_jgd >= 8 * per_fo);
    }
}
