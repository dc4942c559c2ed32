//! Zero-order optimization through unrolled flow sampling chains.
//!
//! A sampling chain (velocity backend + solver grid + condition) is wrapped as
//! a black box `f` that maps a starting state to a generated sample. The
//! optimizer inverts `f` with Jacobian-free fixed-point iterations, the
//! [`bound`] module estimates the largest step size that keeps them
//! contractive, and [`experiments`] runs inversion, editing and step-size
//! protocols on analytic Gaussian-mixture and affine fields.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod baselines;
pub mod bound;
pub mod config;
pub mod ddim;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod io;
pub mod mixture;
pub mod optimizer;
pub mod par;
pub mod schedule;

/// Dense state vector.
pub type State = nalgebra::DVector<f64>;

/// Largest supported state dimension.
pub const MAX_DIM: usize = 64;

pub use backend::{eval_velocity, AffineParams, BackendKind, Condition, Payload, VelocityBackend};
pub use baselines::{invert_fixed_point, jacobian_gd, FixedPointInversionConfig, JacobianGDConfig};
pub use bound::{
    affine_bound_exact, estimate_bound_mc, pairwise_ratio, proof_interval, BoundConfig, BoundEstimate,
};
pub use ddim::{ddim_delta, DdimSchedule};
pub use error::{Error, Result};
pub use flow::{ddim_step, flow_step, invert_naive, run_flow, BlackBoxFlow, Solver};
pub use mixture::{GaussianMixture, MixtureSpec};
pub use optimizer::{
    early_stop_select, flowopt_general, flowopt_run, stopgrad_equivalence_check, LossSpec, OptConfig,
    OptTrace, StopCriterion,
};
pub use par::Exec;
pub use schedule::{make_uniform_schedule, FlowSchedule};
