//! Analytic velocity and noise-prediction fields.
//!
//! A [`VelocityBackend`] fixes the kind of field and the state dimension; the
//! field parameters travel with the [`Condition`], so one backend serves both a
//! source and a target condition.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::State;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    /// `v_t(z) = A z + b`, independent of `t`.
    Affine,
    /// Exact marginal velocity of a Gaussian mixture on the rectified-flow path.
    GaussianMixture,
    /// Noise predictor `eps(z, alpha_bar)` for DDIM chains.
    DdimNoisePred,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::Affine => "affine",
            BackendKind::GaussianMixture => "gaussian-mixture",
            BackendKind::DdimNoisePred => "ddim-noise-pred",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl AffineParams {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::invalid(format!(
                "affine matrix must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        Error::check_dim(a.nrows(), b.len())?;
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("affine parameters must be finite"));
        }
        Ok(Self { a, b })
    }

    /// The zero field; its flow map is the identity.
    pub fn zero(dim: usize) -> Self {
        Self {
            a: DMatrix::zeros(dim, dim),
            b: DVector::zeros(dim),
        }
    }

    /// `v(z) = scale * z`.
    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        Self {
            a: DMatrix::identity(dim, dim) * scale,
            b: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    fn apply(&self, z: &State) -> State {
        &self.a * z + &self.b
    }
}

#[derive(Debug, Clone)]
pub enum Payload {
    Affine(AffineParams),
    Mixture(GaussianMixture),
}

impl Payload {
    pub fn dim(&self) -> usize {
        match self {
            Payload::Affine(p) => p.dim(),
            Payload::Mixture(m) => m.dim(),
        }
    }
}

impl PartialEq for Payload {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Payload::Affine(a), Payload::Affine(b)) => a == b,
            (Payload::Mixture(a), Payload::Mixture(b)) => a.spec() == b.spec(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Condition {
    pub tag: String,
    pub payload: Payload,
}

impl Condition {
    pub fn new(tag: impl Into<String>, payload: Payload) -> Self {
        Self {
            tag: tag.into(),
            payload,
        }
    }

    pub fn affine(tag: impl Into<String>, params: AffineParams) -> Self {
        Self::new(tag, Payload::Affine(params))
    }

    pub fn mixture(tag: impl Into<String>, mixture: GaussianMixture) -> Self {
        Self::new(tag, Payload::Mixture(mixture))
    }

    pub fn dim(&self) -> usize {
        self.payload.dim()
    }

    pub fn as_mixture(&self) -> Option<&GaussianMixture> {
        match &self.payload {
            Payload::Mixture(m) => Some(m),
            Payload::Affine(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VelocityBackend {
    pub kind: BackendKind,
    pub dim: usize,
}

impl VelocityBackend {
    pub fn new(kind: BackendKind, dim: usize) -> Result<Self> {
        if dim == 0 || dim > crate::MAX_DIM {
            return Err(Error::invalid(format!(
                "state dimension must lie in [1, {}], got {dim}",
                crate::MAX_DIM
            )));
        }
        Ok(Self { kind, dim })
    }

    /// Checks that `c` carries parameters this backend can evaluate.
    pub fn check_condition(&self, c: &Condition) -> Result<()> {
        Error::check_dim(self.dim, c.dim())?;
        match (self.kind, &c.payload) {
            (BackendKind::Affine, Payload::Affine(_))
            | (BackendKind::GaussianMixture, Payload::Mixture(_))
            | (BackendKind::DdimNoisePred, _) => Ok(()),
            (kind, _) => Err(Error::invalid(format!(
                "condition '{}' does not carry {kind} parameters",
                c.tag
            ))),
        }
    }

    /// Velocity `v_t(z, c)`.
    pub fn velocity(&self, z: &State, t: f64, c: &Condition) -> Result<State> {
        Error::check_dim(self.dim, z.len())?;
        match (self.kind, &c.payload) {
            (BackendKind::Affine, Payload::Affine(p)) => {
                Error::check_dim(self.dim, p.dim())?;
                Ok(p.apply(z))
            }
            (BackendKind::GaussianMixture, Payload::Mixture(m)) => m.rf_velocity(z, t),
            (BackendKind::DdimNoisePred, _) => Err(Error::invalid(
                "ddim-noise-pred backend predicts noise, not velocity",
            )),
            (kind, _) => Err(Error::invalid(format!(
                "condition '{}' does not carry {kind} parameters",
                c.tag
            ))),
        }
    }

    /// Noise prediction at signal level `alpha_bar`. Affine payloads give a
    /// time-independent predictor `A z + b`.
    pub fn noise(&self, z: &State, alpha_bar: f64, c: &Condition) -> Result<State> {
        Error::check_dim(self.dim, z.len())?;
        if self.kind != BackendKind::DdimNoisePred {
            return Err(Error::invalid(format!(
                "{} backend does not predict noise",
                self.kind
            )));
        }
        Error::check_dim(self.dim, c.dim())?;
        match &c.payload {
            Payload::Affine(p) => Ok(p.apply(z)),
            Payload::Mixture(m) => m.vp_noise(z, alpha_bar),
        }
    }
}

/// Free-function form of [`VelocityBackend::velocity`].
pub fn eval_velocity(
    backend: &VelocityBackend,
    z: &State,
    t: f64,
    c: &Condition,
) -> Result<State> {
    backend.velocity(z, t, c)
}
