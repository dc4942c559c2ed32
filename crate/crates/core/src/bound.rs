//! Step-size bound for the zero-order iterations.
//!
//! The iterations `z <- z - eta (f(z) - y)` contract whenever
//!
//! ```text
//! 0 < eta < 2 inf <u1 - u2, f(u1) - f(u2)> / ||f(u1) - f(u2)||^2
//! ```
//!
//! provided the cosine between `u1 - u2` and `f(u1) - f(u2)` stays bounded away
//! from zero. The infimum is estimated by Monte Carlo over Gaussian pairs
//! `u2 = sqrt(a) u1 + sqrt(1 - a) eps` for a grid of correlation levels `a`,
//! which keeps both points standard normal while shrinking their distance as
//! `a -> 1`. A sampled minimum can only overestimate the true infimum.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backend::Condition;
use crate::error::{Error, Result};
use crate::flow::BlackBoxFlow;
use crate::par::{map_indexed, Exec};
use crate::State;

pub const DEGENERATE_THRESHOLD: f64 = 1e-12;
pub const MAX_RESAMPLES: usize = 100;
pub const DEFAULT_ALPHAS: [f64; 6] = [0.0, 0.5, 0.9, 0.99, 0.999, 0.9999];
pub const DEFAULT_REALIZATIONS: usize = 2000;
pub const DEFAULT_SAFETY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRatio {
    /// `<du, df> / ||df||^2`
    pub ratio: f64,
    /// `<du, df> / (||du|| ||df||)`
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub u1: State,
    pub u2: State,
    pub eps: State,
    pub alpha: f64,
    pub ratio: f64,
    pub cosine: f64,
}

/// Both quotients for one pair. Costs two passes through the chain.
pub fn pairwise_ratio(flow: &BlackBoxFlow, u1: &State, u2: &State) -> Result<PairRatio> {
    Error::check_dim(flow.dim(), u1.len())?;
    Error::check_dim(flow.dim(), u2.len())?;
    let du = u1 - u2;
    if du.norm() == 0.0 {
        return Err(Error::invalid("pair points must differ"));
    }
    let df = flow.eval(u1)? - flow.eval(u2)?;
    let df_norm = df.norm();
    if !(df_norm >= DEGENERATE_THRESHOLD) {
        return Err(Error::DegeneratePair(df_norm));
    }
    let inner = du.dot(&df);
    Ok(PairRatio {
        ratio: inner / (df_norm * df_norm),
        cosine: inner / (du.norm() * df_norm),
    })
}

/// Draws a correlated pair at level `alpha` from `rng`.
pub fn draw_pair<R: Rng + ?Sized>(rng: &mut R, dim: usize, alpha: f64) -> (State, State, State) {
    let u1 = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let eps = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let u2 = &u1 * alpha.sqrt() + &eps * (1.0 - alpha).sqrt();
    (u1, u2, eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub num_realizations: usize,
    pub alphas: Vec<f64>,
    pub seed: u64,
    /// Fraction of the bound reported as the suggested step size.
    pub safety: f64,
    #[serde(default)]
    pub exec: Exec,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            num_realizations: DEFAULT_REALIZATIONS,
            alphas: DEFAULT_ALPHAS.to_vec(),
            seed: 0,
            safety: DEFAULT_SAFETY,
            exec: Exec::Parallel,
        }
    }
}

impl BoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_realizations == 0 {
            return Err(Error::invalid("need at least one realization"));
        }
        if self.alphas.is_empty() {
            return Err(Error::invalid("alpha grid is empty"));
        }
        if self.alphas.iter().any(|a| !(*a >= 0.0 && *a < 1.0)) {
            return Err(Error::invalid("alpha values must lie in [0, 1)"));
        }
        if !(self.safety > 0.0 && self.safety < 1.0) {
            return Err(Error::invalid("safety factor must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaStats {
    pub alpha: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub min_cosine: f64,
    pub resamples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub schema_version: u32,
    pub per_alpha: Vec<AlphaStats>,
    /// Smallest sampled ratio over every level.
    pub global_min: f64,
    /// Largest sampled ratio, used by [`proof_interval`].
    pub sup_ratio: f64,
    /// Step-size bound `2 * global_min`.
    pub bound: f64,
    pub suggested_eta: f64,
    pub safety: f64,
    pub beta_min: f64,
    pub num_realizations: usize,
    pub seed: u64,
    pub nfe: u64,
}

impl BoundEstimate {
    pub fn per_alpha_min(&self) -> Vec<(f64, f64)> {
        self.per_alpha.iter().map(|a| (a.alpha, a.min_ratio)).collect()
    }

    /// `alpha,min_ratio,bound,max_ratio,min_cosine` rows.
    pub fn alpha_csv(&self) -> String {
        let mut s = String::from("# flowopt-alpha schema_version=1\nalpha,min_ratio,bound,max_ratio,min_cosine\n");
        for a in &self.per_alpha {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e}",
                a.alpha,
                a.min_ratio,
                2.0 * a.min_ratio,
                a.max_ratio,
                a.min_cosine
            );
        }
        s
    }
}

struct Realization {
    per_alpha: Vec<(PairRatio, usize)>,
    nfe: u64,
}

fn realization(flow: &BlackBoxFlow, cfg: &BoundConfig, index: usize) -> Result<Realization> {
    let local = flow.fork();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let dim = flow.dim();
    let (mut u1, _, mut eps) = draw_pair(&mut rng, dim, 0.0);
    let mut per_alpha = Vec::with_capacity(cfg.alphas.len());
    for &alpha in &cfg.alphas {
        let mut retries = 0;
        loop {
            let u2 = &u1 * alpha.sqrt() + &eps * (1.0 - alpha).sqrt();
            let attempt = if u1 == u2 {
                Err(Error::DegeneratePair(0.0))
            } else {
                pairwise_ratio(&local, &u1, &u2)
            };
            match attempt {
                Ok(r) => {
                    per_alpha.push((r, retries));
                    break;
                }
                Err(Error::DegeneratePair(_)) if retries < MAX_RESAMPLES => {
                    retries += 1;
                    let (a, _, e) = draw_pair(&mut rng, dim, 0.0);
                    u1 = a;
                    eps = e;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(Realization {
        per_alpha,
        nfe: local.nfe(),
    })
}

/// Monte-Carlo estimate of the step-size bound for `flow` under its own
/// condition. Deterministic in `cfg.seed`; realization `r` always uses the
/// same random stream regardless of how many realizations are drawn.
pub fn estimate_bound_mc(flow: &BlackBoxFlow, cfg: &BoundConfig) -> Result<BoundEstimate> {
    estimate_bound_mc_over(flow, std::slice::from_ref(flow.condition()), cfg)
}

/// As [`estimate_bound_mc`], cycling realization `r` through
/// `conditions[r % conditions.len()]`.
pub fn estimate_bound_mc_over(
    flow: &BlackBoxFlow,
    conditions: &[Condition],
    cfg: &BoundConfig,
) -> Result<BoundEstimate> {
    cfg.validate()?;
    if conditions.is_empty() {
        return Err(Error::invalid("need at least one condition"));
    }
    let flows = conditions
        .iter()
        .map(|c| flow.with_condition(c.clone()))
        .collect::<Result<Vec<_>>>()?;

    let results = map_indexed(cfg.num_realizations, cfg.exec, |r| {
        realization(&flows[r % flows.len()], cfg, r)
    });

    let mut per_alpha: Vec<AlphaStats> = cfg
        .alphas
        .iter()
        .map(|&alpha| AlphaStats {
            alpha,
            min_ratio: f64::INFINITY,
            max_ratio: f64::NEG_INFINITY,
            min_cosine: f64::INFINITY,
            resamples: 0,
        })
        .collect();
    let mut nfe = 0;
    for res in results {
        let res = res?;
        nfe += res.nfe;
        for (stats, (pr, retries)) in per_alpha.iter_mut().zip(res.per_alpha) {
            stats.min_ratio = stats.min_ratio.min(pr.ratio);
            stats.max_ratio = stats.max_ratio.max(pr.ratio);
            stats.min_cosine = stats.min_cosine.min(pr.cosine);
            stats.resamples += retries;
        }
    }
    flow.add_nfe(nfe);

    let global_min = per_alpha.iter().map(|a| a.min_ratio).fold(f64::INFINITY, f64::min);
    let sup_ratio = per_alpha.iter().map(|a| a.max_ratio).fold(f64::NEG_INFINITY, f64::max);
    let beta_min = per_alpha.iter().map(|a| a.min_cosine).fold(f64::INFINITY, f64::min);
    if !(beta_min > 0.0) {
        return Err(Error::AssumptionViolated { beta_min });
    }
    let bound = 2.0 * global_min;
    Ok(BoundEstimate {
        schema_version: 1,
        per_alpha,
        global_min,
        sup_ratio,
        bound,
        suggested_eta: cfg.safety * bound,
        safety: cfg.safety,
        beta_min,
        num_realizations: cfg.num_realizations,
        seed: cfg.seed,
        nfe,
    })
}

/// Exact bound `2 / lambda_max(M)` for an affine chain with symmetric
/// positive-definite linear part `M`: on an eigendirection the ratio is
/// `lambda / lambda^2`, and every other direction mixes these.
pub fn affine_bound_exact(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::invalid("matrix must be square and nonempty"));
    }
    let scale = m.amax().max(1e-300);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(Error::invalid("matrix is not symmetric"));
    }
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.min();
    if !(min > 0.0) {
        return Err(Error::invalid(format!(
            "matrix is not positive definite (smallest eigenvalue {min})"
        )));
    }
    Ok(2.0 / eig.eigenvalues.max())
}

/// Conservative step-size interval `(eta1_bar, eta2_bar)` that guarantees a
/// contraction factor `gamma = sqrt(1 - kappa)`, from the sampled infimum and
/// supremum of the ratio and the sampled minimum cosine `beta`. As
/// `kappa -> 0` this tends to `(0, 2 * global_min)`.
pub fn proof_interval(est: &BoundEstimate, kappa: f64) -> Result<(f64, f64)> {
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(Error::invalid(format!("kappa must lie in (0, 1], got {kappa}")));
    }
    let beta = est.beta_min;
    if !(beta > 0.0) {
        return Err(Error::AssumptionViolated { beta_min: beta });
    }
    let q = kappa / (beta * beta);
    if q > 1.0 {
        return Err(Error::invalid(format!(
            "kappa / beta^2 = {q} exceeds 1; no real interval"
        )));
    }
    let root = (1.0 - q).sqrt();
    Ok((est.sup_ratio * (1.0 - root), est.global_min * (1.0 + root)))
}
