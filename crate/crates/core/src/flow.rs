//! The unrolled sampling chain `z0 = f(z_start, c)` as an evaluable black box.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::backend::{BackendKind, Condition, Payload, VelocityBackend};
use crate::ddim::{ddim_delta, DdimSchedule};
use crate::error::{Error, Result};
use crate::schedule::FlowSchedule;
use crate::State;

#[derive(Debug, Clone, PartialEq)]
pub enum Solver {
    /// Explicit Euler on a flow-time grid.
    Euler(FlowSchedule),
    /// Deterministic DDIM steps on an `alpha_bar` grid.
    Ddim(DdimSchedule),
}

impl Solver {
    pub fn num_steps(&self) -> usize {
        match self {
            Solver::Euler(s) => s.num_steps(),
            Solver::Ddim(s) => s.num_steps(),
        }
    }
}

/// The chain with its state frozen after a forward pass: `f~(w) = scale * w + offset`
/// reproduces `f` at the evaluated point while treating every velocity or
/// noise prediction as a constant.
#[derive(Debug, Clone)]
pub struct FrozenChain {
    pub scale: f64,
    pub offset: State,
}

impl FrozenChain {
    pub fn apply(&self, w: &State) -> State {
        w * self.scale + &self.offset
    }
}

/// Backend + solver + condition, with a count of backend evaluations.
///
/// The counter is atomic so one flow can be shared read-only across threads;
/// use [`BlackBoxFlow::fork`] to give a worker its own count.
#[derive(Debug)]
pub struct BlackBoxFlow {
    backend: VelocityBackend,
    solver: Solver,
    condition: Condition,
    nfe: AtomicU64,
}

impl Clone for BlackBoxFlow {
    fn clone(&self) -> Self {
        Self {
            backend: self.backend,
            solver: self.solver.clone(),
            condition: self.condition.clone(),
            nfe: AtomicU64::new(self.nfe()),
        }
    }
}

impl BlackBoxFlow {
    pub fn new(backend: VelocityBackend, solver: Solver, condition: Condition) -> Result<Self> {
        backend.check_condition(&condition)?;
        match (&solver, backend.kind) {
            (Solver::Ddim(s), BackendKind::DdimNoisePred) => {
                ddim_delta(s)?;
            }
            (Solver::Euler(_), BackendKind::Affine | BackendKind::GaussianMixture) => {}
            (Solver::Ddim(_), kind) => {
                return Err(Error::invalid(format!(
                    "ddim solver needs a ddim-noise-pred backend, got {kind}"
                )))
            }
            (Solver::Euler(_), kind) => {
                return Err(Error::invalid(format!(
                    "euler solver needs a velocity backend, got {kind}"
                )))
            }
        }
        Ok(Self {
            backend,
            solver,
            condition,
            nfe: AtomicU64::new(0),
        })
    }

    pub fn euler(backend: VelocityBackend, schedule: FlowSchedule, condition: Condition) -> Result<Self> {
        Self::new(backend, Solver::Euler(schedule), condition)
    }

    pub fn ddim(backend: VelocityBackend, schedule: DdimSchedule, condition: Condition) -> Result<Self> {
        Self::new(backend, Solver::Ddim(schedule), condition)
    }

    /// Same chain with a fresh evaluation counter.
    pub fn fork(&self) -> Self {
        Self {
            backend: self.backend,
            solver: self.solver.clone(),
            condition: self.condition.clone(),
            nfe: AtomicU64::new(0),
        }
    }

    /// Same backend and solver under another condition, with a fresh counter.
    pub fn with_condition(&self, condition: Condition) -> Result<Self> {
        Self::new(self.backend, self.solver.clone(), condition)
    }

    pub fn backend(&self) -> &VelocityBackend {
        &self.backend
    }

    pub fn solver(&self) -> &Solver {
        &self.solver
    }

    pub fn condition(&self) -> &Condition {
        &self.condition
    }

    pub fn dim(&self) -> usize {
        self.backend.dim
    }

    pub fn num_steps(&self) -> usize {
        self.solver.num_steps()
    }

    pub fn nfe(&self) -> u64 {
        self.nfe.load(Ordering::Relaxed)
    }

    /// Charges evaluations made on a fork back to this flow.
    pub fn add_nfe(&self, n: u64) {
        self.nfe.fetch_add(n, Ordering::Relaxed);
    }

    pub fn reset_nfe(&self) {
        self.nfe.store(0, Ordering::Relaxed);
    }

    /// Multiplier the stop-grad gradient picks up through the chain: 1 for
    /// flows, `1 / sqrt(alpha_T)` for DDIM.
    pub fn delta_scale(&self) -> f64 {
        match &self.solver {
            Solver::Euler(_) => 1.0,
            Solver::Ddim(s) => s.delta_closed_form(),
        }
    }

    pub(crate) fn velocity(&self, z: &State, t: f64) -> Result<State> {
        let v = self.backend.velocity(z, t, &self.condition)?;
        self.nfe.fetch_add(1, Ordering::Relaxed);
        Ok(v)
    }

    fn noise(&self, z: &State, alpha_bar: f64) -> Result<State> {
        let e = self.backend.noise(z, alpha_bar, &self.condition)?;
        self.nfe.fetch_add(1, Ordering::Relaxed);
        Ok(e)
    }

    fn euler_schedule(&self) -> Result<&FlowSchedule> {
        match &self.solver {
            Solver::Euler(s) => Ok(s),
            Solver::Ddim(_) => Err(Error::invalid("operation needs an euler solver")),
        }
    }

    fn ddim_schedule(&self) -> Result<&DdimSchedule> {
        match &self.solver {
            Solver::Ddim(s) => Ok(s),
            Solver::Euler(_) => Err(Error::invalid("operation needs a ddim solver")),
        }
    }

    /// One Euler step `z + v_t(z, c) * delta_t`.
    pub fn flow_step(&self, z: &State, t: f64, delta_t: f64) -> Result<State> {
        if t + delta_t < -1e-12 {
            return Err(Error::invalid(format!(
                "step from t = {t} by {delta_t} leaves [0, 1]"
            )));
        }
        let v = self.velocity(z, t)?;
        Ok(z + v * delta_t)
    }

    /// One DDIM step from level `index` to `index - 1`.
    pub fn ddim_step(&self, z: &State, index: usize) -> Result<State> {
        let sched = self.ddim_schedule()?;
        let (scale, coeff) = sched.step_coefficients(index)?;
        let eps = self.noise(z, sched.alpha_bar()[index])?;
        Ok(z * scale + eps * coeff)
    }

    /// Runs the whole chain and returns every intermediate state.
    pub fn run(&self, z_start: &State) -> Result<(State, Vec<State>)> {
        Error::check_dim(self.dim(), z_start.len())?;
        let mut traj = Vec::with_capacity(self.num_steps() + 1);
        traj.push(z_start.clone());
        let mut z = z_start.clone();
        match &self.solver {
            Solver::Euler(s) => {
                let dt = s.delta_t();
                for &t in &s.times()[..s.num_steps()] {
                    z = self.flow_step(&z, t, dt)?;
                    traj.push(z.clone());
                }
            }
            Solver::Ddim(s) => {
                for index in (1..=s.num_steps()).rev() {
                    z = self.ddim_step(&z, index)?;
                    traj.push(z.clone());
                }
            }
        }
        Ok((z, traj))
    }

    /// `f(z_start, c)`.
    pub fn eval(&self, z_start: &State) -> Result<State> {
        Error::check_dim(self.dim(), z_start.len())?;
        let mut z = z_start.clone();
        match &self.solver {
            Solver::Euler(s) => {
                let dt = s.delta_t();
                for &t in &s.times()[..s.num_steps()] {
                    z = self.flow_step(&z, t, dt)?;
                }
            }
            Solver::Ddim(s) => {
                for index in (1..=s.num_steps()).rev() {
                    z = self.ddim_step(&z, index)?;
                }
            }
        }
        Ok(z)
    }

    /// Forward pass that also records the chain with every backend output
    /// frozen at its forward value.
    pub fn eval_frozen(&self, z_start: &State) -> Result<(State, FrozenChain)> {
        Error::check_dim(self.dim(), z_start.len())?;
        let mut z = z_start.clone();
        let mut offset = DVector::zeros(self.dim());
        let mut scale = 1.0;
        match &self.solver {
            Solver::Euler(s) => {
                let dt = s.delta_t();
                for &t in &s.times()[..s.num_steps()] {
                    let v = self.velocity(&z, t)?;
                    let inc = v * dt;
                    z += &inc;
                    offset += inc;
                }
            }
            Solver::Ddim(s) => {
                for index in (1..=s.num_steps()).rev() {
                    let (a, c) = s.step_coefficients(index)?;
                    let eps = self.noise(&z, s.alpha_bar()[index])?;
                    z = &z * a + &eps * c;
                    offset = offset * a + eps * c;
                    scale *= a;
                }
            }
        }
        Ok((z, FrozenChain { scale, offset }))
    }

    /// Naive inversion: walks the grid from the data end back to the start,
    /// reusing the backend output at the current point for each step.
    pub fn invert_naive(&self, z0: &State) -> Result<State> {
        Error::check_dim(self.dim(), z0.len())?;
        let mut z = z0.clone();
        match &self.solver {
            Solver::Euler(s) => {
                let dt = s.delta_t();
                let times = s.times();
                for k in (0..s.num_steps()).rev() {
                    let v = self.velocity(&z, times[k + 1])?;
                    z = &z - v * dt;
                }
            }
            Solver::Ddim(s) => {
                for index in 1..=s.num_steps() {
                    let (a, c) = s.step_coefficients(index)?;
                    let eps = self.noise(&z, s.alpha_bar()[index - 1])?;
                    z = (&z - eps * c) / a;
                }
            }
        }
        Ok(z)
    }

    /// Linear part `M` of the chain when every step is affine in the state
    /// (affine velocity under Euler, affine noise predictor under DDIM).
    pub fn linear_part(&self) -> Option<DMatrix<f64>> {
        let Payload::Affine(p) = &self.condition.payload else {
            return None;
        };
        let d = self.dim();
        let id = DMatrix::<f64>::identity(d, d);
        let mut m = id.clone();
        match &self.solver {
            Solver::Euler(s) => {
                let step = &id + &p.a * s.delta_t();
                for _ in 0..s.num_steps() {
                    m = &step * m;
                }
            }
            Solver::Ddim(s) => {
                for index in (1..=s.num_steps()).rev() {
                    let (a, c) = s.step_coefficients(index).ok()?;
                    m = (&id * a + &p.a * c) * m;
                }
            }
        }
        Some(m)
    }

    pub(crate) fn euler_times(&self) -> Result<(&[f64], f64)> {
        let s = self.euler_schedule()?;
        Ok((s.times(), s.delta_t()))
    }
}

/// Free-function form of [`BlackBoxFlow::flow_step`].
pub fn flow_step(flow: &BlackBoxFlow, z: &State, t: f64, delta_t: f64) -> Result<State> {
    flow.flow_step(z, t, delta_t)
}

/// Free-function form of [`BlackBoxFlow::run`].
pub fn run_flow(flow: &BlackBoxFlow, z_start: &State) -> Result<(State, Vec<State>)> {
    flow.run(z_start)
}

/// Free-function form of [`BlackBoxFlow::ddim_step`].
pub fn ddim_step(flow: &BlackBoxFlow, z: &State, index: usize) -> Result<State> {
    flow.ddim_step(z, index)
}

/// Free-function form of [`BlackBoxFlow::invert_naive`].
pub fn invert_naive(flow: &BlackBoxFlow, z0: &State) -> Result<State> {
    flow.invert_naive(z0)
}
