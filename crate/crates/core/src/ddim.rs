//! Signal-level schedules for DDIM chains.
//!
//! `alpha_bar[0] = 1` is the clean-data end and `alpha_bar[T]` the noisiest
//! level. A deterministic DDIM step from level `i` to `i - 1` is
//!
//! ```text
//! z_{i-1} = sqrt(a_{i-1} / a_i) z_i + (sqrt(1 - a_{i-1}) - sqrt(a_{i-1}) sqrt(1 - a_i) / sqrt(a_i)) eps
//! ```
//!
//! With the noise prediction held fixed, the whole chain scales its input by
//! `prod_i sqrt(a_{i-1} / a_i) = 1 / sqrt(a_T)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Agreement required between the telescoped product and `1 / sqrt(a_T)`.
pub const TELESCOPE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdimSchedule {
    alpha_bar: Vec<f64>,
}

impl DdimSchedule {
    /// Validates `alpha_bar`: at least two entries, all in (0, 1], starting at
    /// exactly 1 and non-increasing toward the noise end.
    pub fn new(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::invalid("ddim schedule needs at least one step"));
        }
        if alpha_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::invalid("alpha_bar values must lie in (0, 1]"));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::invalid(format!(
                "alpha_bar[0] must be 1 at the data end, got {}",
                alpha_bar[0]
            )));
        }
        if alpha_bar.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid(
                "alpha_bar must be non-increasing from the data end",
            ));
        }
        Ok(Self { alpha_bar })
    }

    /// Skips validation. Only meant for exercising the telescoping check.
    #[doc(hidden)]
    pub fn new_unchecked(alpha_bar: Vec<f64>) -> Self {
        Self { alpha_bar }
    }

    /// Cosine-shaped schedule `a_i = cos^2(0.97 * pi/2 * i / T)`.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("ddim schedule needs at least one step"));
        }
        let alpha_bar = (0..=steps)
            .map(|i| {
                let x = 0.97 * std::f64::consts::FRAC_PI_2 * i as f64 / steps as f64;
                x.cos().powi(2)
            })
            .collect();
        Self::new(alpha_bar)
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `(state coefficient, noise coefficient)` of the step from level
    /// `index` to `index - 1`.
    pub fn step_coefficients(&self, index: usize) -> Result<(f64, f64)> {
        if index == 0 || index > self.num_steps() {
            return Err(Error::invalid(format!(
                "ddim step index must lie in [1, {}], got {index}",
                self.num_steps()
            )));
        }
        let prev = self.alpha_bar[index - 1];
        let cur = self.alpha_bar[index];
        let scale = (prev / cur).sqrt();
        let noise = (1.0 - prev).sqrt() - prev.sqrt() * (1.0 - cur).sqrt() / cur.sqrt();
        Ok((scale, noise))
    }

    pub fn delta_product(&self) -> f64 {
        (1..=self.num_steps())
            .map(|i| (self.alpha_bar[i - 1] / self.alpha_bar[i]).sqrt())
            .product()
    }

    pub fn delta_closed_form(&self) -> f64 {
        1.0 / self.alpha_bar[self.num_steps()].sqrt()
    }
}

/// Chain coefficient `1 / sqrt(a_T)`, after checking it against the
/// telescoped product of per-step state coefficients.
pub fn ddim_delta(sched: &DdimSchedule) -> Result<f64> {
    let product = sched.delta_product();
    let closed = sched.delta_closed_form();
    let gap = (product - closed).abs();
    if !(gap <= TELESCOPE_TOL * closed.max(1.0)) {
        return Err(Error::invalid(format!(
            "telescoped product {product} disagrees with 1/sqrt(alpha_T) = {closed}"
        )));
    }
    Ok(closed)
}
