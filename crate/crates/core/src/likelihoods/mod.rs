//! Negative log-likelihoods `g(x) = -log ℓ(y|x)` and their gradients.

mod closure;
mod fourier;
mod linear;

pub use closure::{
    closure_noise_levels, independent_quads, independent_triangles, simulate_measurements, ClosureData,
    ClosureForward, ClosureLikelihood, ClosureSystem, TelescopeArray,
};
pub use fourier::{MaskedFourierLikelihood, MaskedFourierOperator};
pub use linear::GaussianLinearLikelihood;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Value and gradient of a negative log-likelihood.
pub trait Likelihood: Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> Result<f64>;

    /// Gradient written into `out`, after any configured norm clipping.
    fn grad_into(&self, x: &[f64], out: &mut [f64]) -> Result<()>;

    fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        crate::check_dim(self.dim(), x.len())?;
        let mut out = vec![0.0; self.dim()];
        self.grad_into(x, &mut out)?;
        Ok(out)
    }

    /// Gradients for a batch of points stored column-wise (`dim × batch`).
    fn grad_batch(&self, xs: &DMatrix<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        let n = self.dim();
        for (x, o) in xs
            .as_slice()
            .chunks_exact(n)
            .zip(out.as_mut_slice().chunks_exact_mut(n))
        {
            self.grad_into(x, o)?;
        }
        Ok(())
    }
}

/// `g ≡ 0`; turns the samplers into prior samplers.
#[derive(Clone, Copy, Debug)]
pub struct FlatLikelihood {
    pub dim: usize,
}

impl Likelihood for FlatLikelihood {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, _x: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
    fn grad_into(&self, _x: &[f64], out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|o| *o = 0.0);
        Ok(())
    }
}

/// Serializable union of the forward models.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum LikelihoodModel {
    GaussianLinear(GaussianLinearLikelihood),
    MaskedFourier(MaskedFourierLikelihood),
    Closure(ClosureLikelihood),
}

impl Likelihood for LikelihoodModel {
    fn dim(&self) -> usize {
        match self {
            LikelihoodModel::GaussianLinear(l) => l.dim(),
            LikelihoodModel::MaskedFourier(l) => l.dim(),
            LikelihoodModel::Closure(l) => l.dim(),
        }
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        match self {
            LikelihoodModel::GaussianLinear(l) => l.value(x),
            LikelihoodModel::MaskedFourier(l) => l.value(x),
            LikelihoodModel::Closure(l) => l.value(x),
        }
    }

    fn grad_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            LikelihoodModel::GaussianLinear(l) => l.grad_into(x, out),
            LikelihoodModel::MaskedFourier(l) => l.grad_into(x, out),
            LikelihoodModel::Closure(l) => l.grad_into(x, out),
        }
    }

    fn grad_batch(&self, xs: &DMatrix<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        match self {
            LikelihoodModel::GaussianLinear(l) => l.grad_batch(xs, out),
            LikelihoodModel::MaskedFourier(l) => l.grad_batch(xs, out),
            LikelihoodModel::Closure(l) => l.grad_batch(xs, out),
        }
    }
}

fn check_beta(name: &str, beta: f64) -> Result<()> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(crate::Error::invalid(format!("{name} must be positive, got {beta}")))
    }
}

fn check_clip(r_g: Option<f64>) -> Result<()> {
    match r_g {
        Some(r) if !(r.is_finite() && r > 0.0) => {
            Err(crate::Error::invalid(format!("gradient clip radius must be positive, got {r}")))
        }
        _ => Ok(()),
    }
}
