//! Plug-and-play Monte Carlo posterior sampling.
//!
//! Langevin samplers that plug the score of a (smoothed) prior into the
//! unadjusted Langevin update, in both the PnP form (score evaluated at the
//! likelihood-shifted iterate) and the RED form (score at the current
//! iterate), optionally with weighted annealing of the prior.
//!
//! The crate is organised as:
//!
//! - [`mixture`] and [`rng`]: Gaussian mixtures with exact log-density,
//!   score and sampling, plus the seeded per-chain random streams.
//! - [`priors`]: score models of the smoothed prior, the MMSE denoiser and
//!   score clipping.
//! - [`likelihoods`]: dense Gaussian linear, masked Fourier and closure
//!   (interferometric) negative log-likelihoods with analytic gradients.
//! - [`samplers`]: annealing schedule, the PnP/RED update rules and the batch
//!   chain runner.
//! - [`diagnostics`]: EM mixture fitting, grid-quadrature Fisher information
//!   and KL divergence, conjugate posterior oracle and sample statistics.
//! - [`experiments`]: the configuration-driven experiment runner behind the
//!   `pmc` binary.

pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod likelihoods;
pub mod mixture;
pub mod priors;
pub mod rng;
pub mod samplers;

pub use error::{Error, Result};
pub use mixture::{Covariance, GaussianMixture};
pub use priors::{mmse_denoise, Score, ScoreKind, ScoreModel};
pub use rng::RngStream;

/// Euclidean norm.
pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Rescale `v` in place so that its Euclidean norm does not exceed `radius`.
pub fn clip_norm(v: &mut [f64], radius: f64) {
    let n = norm(v);
    if n > radius {
        let s = radius / n;
        v.iter_mut().for_each(|a| *a *= s);
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// Hex-encoded SHA-256 digest of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
