//! Gaussian mixtures and their exact posterior quantities along two
//! interpolation paths.
//!
//! Rectified-flow path: `z_t = (1 - t) x0 + t eps`. Per component `k`,
//! `z_t | k ~ N((1 - t) mu_k, C_k)` with `C_k = (1 - t)^2 Sigma_k + t^2 I`,
//! `Cov(x0, z_t | k) = (1 - t) Sigma_k` and `Cov(eps, z_t | k) = t I`, so
//!
//! ```text
//! E[eps - x0 | z_t, k] = (t I - (1 - t) Sigma_k) C_k^{-1} (z_t - (1 - t) mu_k) - mu_k
//! ```
//!
//! and the marginal velocity is the responsibility-weighted sum.
//!
//! Variance-preserving path: `z = sqrt(a) x0 + sqrt(1 - a) eps` with
//! `C_k = a Sigma_k + (1 - a) I` and `E[eps | z, k] = sqrt(1 - a) C_k^{-1} (z - sqrt(a) mu_k)`.
//!
//! Each covariance is stored in its eigenbasis, so `C_k` is diagonal there for
//! every `t` and no per-evaluation factorization is needed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::State;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
struct Component {
    log_weight: f64,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    /// Orthonormal eigenvectors of the covariance, as columns.
    basis: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    /// Cholesky factor of the covariance, used for sampling.
    chol: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    components: Vec<Component>,
    spec: MixtureSpec,
}

impl GaussianMixture {
    pub fn new(spec: MixtureSpec) -> Result<Self> {
        let n = spec.weights.len();
        if n == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if spec.means.len() != n || spec.covariances.len() != n {
            return Err(Error::invalid(format!(
                "mixture has {n} weights but {} means and {} covariances",
                spec.means.len(),
                spec.covariances.len()
            )));
        }
        if spec.weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        let total: f64 = spec.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let dim = spec.means[0].len();
        if dim == 0 {
            return Err(Error::invalid("mixture dimension must be positive"));
        }

        let mut components = Vec::with_capacity(n);
        for k in 0..n {
            let mean = &spec.means[k];
            Error::check_dim(dim, mean.len())?;
            let rows = &spec.covariances[k];
            Error::check_dim(dim, rows.len())?;
            for row in rows {
                Error::check_dim(dim, row.len())?;
            }
            let covariance = DMatrix::from_fn(dim, dim, |i, j| rows[i][j]);
            if covariance.iter().any(|v| !v.is_finite()) || mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("component {k} has non-finite entries")));
            }
            let scale = covariance.amax().max(1.0);
            if (&covariance - covariance.transpose()).amax() > 1e-12 * scale {
                return Err(Error::invalid(format!(
                    "covariance of component {k} is not symmetric"
                )));
            }
            let eig = SymmetricEigen::new(covariance.clone());
            if eig.eigenvalues.iter().any(|l| !(*l > 0.0)) {
                return Err(Error::invalid(format!(
                    "covariance of component {k} is not positive definite"
                )));
            }
            let chol = covariance
                .clone()
                .cholesky()
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "covariance of component {k} is not positive definite"
                    ))
                })?
                .l();
            components.push(Component {
                log_weight: spec.weights[k].ln(),
                mean: DVector::from_column_slice(mean),
                covariance,
                basis: eig.eigenvectors,
                eigenvalues: eig.eigenvalues,
                chol,
            });
        }
        Ok(Self {
            dim,
            weights: spec.weights.clone(),
            components,
            spec,
        })
    }

    /// Isotropic single-component mixture `N(mean, sigma^2 I)`.
    pub fn isotropic(mean: &[f64], sigma: f64) -> Result<Self> {
        let d = mean.len();
        let cov = (0..d)
            .map(|i| (0..d).map(|j| if i == j { sigma * sigma } else { 0.0 }).collect())
            .collect();
        Self::new(MixtureSpec {
            weights: vec![1.0],
            means: vec![mean.to_vec()],
            covariances: vec![cov],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for (w, c) in self.weights.iter().zip(&self.components) {
            m.axpy(*w, &c.mean, 1.0);
        }
        m
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let mut cov = DMatrix::zeros(self.dim, self.dim);
        for (w, c) in self.weights.iter().zip(&self.components) {
            let d = &c.mean - &m;
            cov += (&c.covariance + &d * d.transpose()) * *w;
        }
        cov
    }

    /// Draws one sample from the mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = k;
                break;
            }
        }
        let c = &self.components[pick];
        let eps = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        &c.mean + &c.chol * eps
    }

    pub fn log_density(&self, x: &State) -> Result<f64> {
        Error::check_dim(self.dim, x.len())?;
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let s = c.basis.tr_mul(&(x - &c.mean));
                let quad: f64 = s.iter().zip(c.eigenvalues.iter()).map(|(s, l)| s * s / l).sum();
                let logdet: f64 = c.eigenvalues.iter().map(|l| l.ln()).sum();
                c.log_weight - 0.5 * (quad + logdet + self.dim as f64 * LN_2PI)
            })
            .collect();
        Ok(log_sum_exp(&logs))
    }

    /// Exact marginal velocity `E[eps - x0 | z_t = z]` on the rectified-flow path.
    pub fn rf_velocity(&self, z: &State, t: f64) -> Result<State> {
        Error::check_dim(self.dim, z.len())?;
        let a = 1.0 - t;
        let mut parts = Vec::with_capacity(self.components.len());
        let mut logs = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let r = z - &c.mean * a;
            let s = c.basis.tr_mul(&r);
            let mut quad = 0.0;
            let mut logdet = 0.0;
            let mut coeff = DVector::zeros(self.dim);
            for i in 0..self.dim {
                let lam = c.eigenvalues[i];
                let var = a * a * lam + t * t;
                quad += s[i] * s[i] / var;
                logdet += var.ln();
                coeff[i] = (t - a * lam) * s[i] / var;
            }
            let v = &c.basis * coeff - &c.mean;
            logs.push(c.log_weight - 0.5 * (quad + logdet));
            parts.push(v);
        }
        Ok(blend(&logs, parts, self.dim))
    }

    /// Exact noise prediction `E[eps | z]` on the variance-preserving path with
    /// signal level `alpha_bar`.
    pub fn vp_noise(&self, z: &State, alpha_bar: f64) -> Result<State> {
        Error::check_dim(self.dim, z.len())?;
        let sa = alpha_bar.sqrt();
        let sn = (1.0 - alpha_bar).max(0.0).sqrt();
        let mut parts = Vec::with_capacity(self.components.len());
        let mut logs = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let r = z - &c.mean * sa;
            let s = c.basis.tr_mul(&r);
            let mut quad = 0.0;
            let mut logdet = 0.0;
            let mut coeff = DVector::zeros(self.dim);
            for i in 0..self.dim {
                let var = alpha_bar * c.eigenvalues[i] + (1.0 - alpha_bar);
                quad += s[i] * s[i] / var;
                logdet += var.ln();
                coeff[i] = sn * s[i] / var;
            }
            logs.push(c.log_weight - 0.5 * (quad + logdet));
            parts.push(&c.basis * coeff);
        }
        Ok(blend(&logs, parts, self.dim))
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn blend(logs: &[f64], parts: Vec<State>, dim: usize) -> State {
    if parts.len() == 1 {
        return parts.into_iter().next().unwrap();
    }
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ws: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = ws.iter().sum();
    let mut out = DVector::zeros(dim);
    for (w, p) in ws.iter().zip(&parts) {
        out.axpy(w / total, p, 1.0);
    }
    out
}
