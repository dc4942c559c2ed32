//! Lossy linear encode/decode pair. `D E` is an orthogonal projector of rank
//! `k < d`, so a roundtrip keeps the retained subspace and drops the rest.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::State;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearCodec {
    encode: DMatrix<f64>,
    decode: DMatrix<f64>,
}

impl LinearCodec {
    /// `encode` is `k x d`, `decode` is `d x k`; their product must be an
    /// orthogonal projector of rank `k < d`.
    pub fn new(encode: DMatrix<f64>, decode: DMatrix<f64>) -> Result<Self> {
        let (k, d) = encode.shape();
        if decode.shape() != (d, k) {
            return Err(Error::invalid(format!(
                "decode must be {d}x{k}, got {}x{}",
                decode.nrows(),
                decode.ncols()
            )));
        }
        if k == 0 || k >= d {
            return Err(Error::invalid(format!("codec needs 0 < k < d, got k={k}, d={d}")));
        }
        let p = &decode * &encode;
        let idempotent = (&p * &p - &p).amax();
        let symmetric = (&p - p.transpose()).amax();
        let rank_gap = (p.trace() - k as f64).abs();
        if idempotent > 1e-10 || symmetric > 1e-10 || rank_gap > 1e-10 {
            return Err(Error::invalid("decode * encode is not a rank-k orthogonal projector"));
        }
        Ok(Self { encode, decode })
    }

    /// Random `k`-dimensional subspace of `R^d`.
    pub fn random<R: Rng + ?Sized>(dim: usize, k: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || k >= dim {
            return Err(Error::invalid(format!("codec needs 0 < k < d, got k={k}, d={dim}")));
        }
        let g = DMatrix::from_fn(dim, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        Self::new(q.transpose(), q)
    }

    pub fn dim(&self) -> usize {
        self.encode.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.encode.nrows()
    }

    pub fn encode(&self, x: &State) -> Result<State> {
        Error::check_dim(self.dim(), x.len())?;
        Ok(&self.encode * x)
    }

    pub fn decode(&self, code: &State) -> Result<State> {
        Error::check_dim(self.latent_dim(), code.len())?;
        Ok(&self.decode * code)
    }

    pub fn roundtrip(&self, x: &State) -> Result<State> {
        self.decode(&self.encode(x)?)
    }
}

/// Free-function form of [`LinearCodec::roundtrip`].
pub fn codec_roundtrip(codec: &LinearCodec, x: &State) -> Result<State> {
    codec.roundtrip(x)
}
