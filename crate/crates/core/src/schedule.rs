//! Uniform timestep grids for the Euler flow solver.
//!
//! Time runs from `t_start` (noise end, at most 1) down to 0 (data end), so the
//! step `delta_t` is negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSchedule {
    t_grid: Vec<f64>,
    delta_t: f64,
}

impl FlowSchedule {
    /// Uniform grid with `steps` Euler steps from `t_start` to 0.
    pub fn uniform(steps: usize, t_start: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(t_start > 0.0 && t_start <= 1.0) {
            return Err(Error::invalid(format!(
                "t_start must lie in (0, 1], got {t_start}"
            )));
        }
        let delta_t = -t_start / steps as f64;
        let mut t_grid: Vec<f64> = (0..=steps)
            .map(|i| t_start * (1.0 - i as f64 / steps as f64))
            .collect();
        t_grid[0] = t_start;
        t_grid[steps] = 0.0;
        Ok(Self { t_grid, delta_t })
    }

    /// The first `n_max` steps of a `total_steps` grid on [0, 1], counted from
    /// the data end: `t_start = n_max / total_steps`, step `-1 / total_steps`.
    pub fn truncated(total_steps: usize, n_max: usize) -> Result<Self> {
        if n_max == 0 || n_max > total_steps {
            return Err(Error::invalid(format!(
                "n_max must lie in [1, {total_steps}], got {n_max}"
            )));
        }
        Self::uniform(n_max, n_max as f64 / total_steps as f64)
    }

    pub fn num_steps(&self) -> usize {
        self.t_grid.len() - 1
    }

    pub fn delta_t(&self) -> f64 {
        self.delta_t
    }

    pub fn t_start(&self) -> f64 {
        self.t_grid[0]
    }

    pub fn times(&self) -> &[f64] {
        &self.t_grid
    }
}

/// Free-function form of [`FlowSchedule::uniform`].
pub fn make_uniform_schedule(steps: usize, t_start: f64) -> Result<FlowSchedule> {
    FlowSchedule::uniform(steps, t_start)
}
