//! Single-chain PMC updates.
//!
//! Both rules draw the score noise (if any) before the Langevin increment,
//! so a PnP and a RED step with the same stream consume draws identically.

use crate::error::{Error, Result};
use crate::likelihoods::Likelihood;
use crate::priors::Score;
use crate::rng::RngStream;
use crate::check_dim;

/// Per-iteration step parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepParams {
    pub gamma: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// Drop the `√(2γ)Z` term, leaving the discretized gradient flow.
    pub deterministic: bool,
}

impl StepParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::invalid(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        if !(self.alpha.is_finite() && self.alpha >= 1.0) {
            return Err(Error::invalid(format!("alpha must be at least 1, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// In-place update `x ← x − γ(g − α s) + √(2γ)Z` given `g = ∇g(x)` and the
/// score `s` already stored in `s`. Returns false on a non-finite result.
pub(crate) fn langevin_update(x: &mut [f64], g: &[f64], s: &[f64], p: &StepParams, rng: &mut RngStream) -> bool {
    let amp = (2.0 * p.gamma).sqrt();
    let mut finite = true;
    for ((xi, gi), si) in x.iter_mut().zip(g).zip(s) {
        let z = if p.deterministic { 0.0 } else { rng.normal() };
        *xi += -p.gamma * (gi - p.alpha * si) + amp * z;
        finite &= xi.is_finite();
    }
    finite
}

fn step<L, S>(x: &[f64], lik: &L, score: &S, p: &StepParams, rng: &mut RngStream, shifted: bool) -> Result<Vec<f64>>
where
    L: Likelihood + ?Sized,
    S: Score + ?Sized,
{
    p.validate()?;
    check_dim(lik.dim(), x.len())?;
    check_dim(score.dim(), x.len())?;
    let g = lik.grad(x)?;
    let mut s = vec![0.0; x.len()];
    if shifted {
        let u: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - p.gamma * gi).collect();
        score.score_into(&u, p.sigma, rng, &mut s);
    } else {
        score.score_into(x, p.sigma, rng, &mut s);
    }
    let mut out = x.to_vec();
    if langevin_update(&mut out, &g, &s, p, rng) {
        Ok(out)
    } else {
        Err(Error::Diverged { iteration: 0 })
    }
}

/// RED form: `x − γ(∇g(x) − α S(x, σ)) + √(2γ)Z`.
pub fn pmc_red_step<L, S>(x: &[f64], lik: &L, score: &S, p: &StepParams, rng: &mut RngStream) -> Result<Vec<f64>>
where
    L: Likelihood + ?Sized,
    S: Score + ?Sized,
{
    step(x, lik, score, p, rng, false)
}

/// PnP form: `x − γ(∇g(x) − α S(x − γ∇g(x), σ)) + √(2γ)Z`.
pub fn pmc_pnp_step<L, S>(x: &[f64], lik: &L, score: &S, p: &StepParams, rng: &mut RngStream) -> Result<Vec<f64>>
where
    L: Likelihood + ?Sized,
    S: Score + ?Sized,
{
    step(x, lik, score, p, rng, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihoods::FlatLikelihood;
    use crate::priors::FnScore;

    struct ConstGrad(f64);
    impl Likelihood for ConstGrad {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, x: &[f64]) -> Result<f64> {
            Ok(self.0 * x[0])
        }
        fn grad_into(&self, _x: &[f64], out: &mut [f64]) -> Result<()> {
            out[0] = self.0;
            Ok(())
        }
    }

    fn det(gamma: f64, alpha: f64) -> StepParams {
        StepParams {
            gamma,
            sigma: 0.0,
            alpha,
            deterministic: true,
        }
    }

    #[test]
    fn zero_drift_is_a_fixed_point() {
        let zero = FnScore::new(3, |_x: &[f64], _s: f64, out: &mut [f64]| out.fill(0.0));
        let x = vec![1.0, -2.0, 3.5];
        let mut rng = RngStream::new(0, 0);
        let p = det(0.3, 1.0);
        assert_eq!(pmc_red_step(&x, &FlatLikelihood { dim: 3 }, &zero, &p, &mut rng).unwrap(), x);
        assert_eq!(pmc_pnp_step(&x, &FlatLikelihood { dim: 3 }, &zero, &p, &mut rng).unwrap(), x);
    }

    #[test]
    fn brownian_increment_has_variance_two_gamma() {
        let zero = FnScore::new(1, |_x: &[f64], _s: f64, out: &mut [f64]| out.fill(0.0));
        let p = StepParams {
            deterministic: false,
            ..det(0.5, 1.0)
        };
        let mut rng = RngStream::new(1, 0);
        let n = 40_000;
        let v: f64 = (0..n)
            .map(|_| pmc_red_step(&[0.0], &FlatLikelihood { dim: 1 }, &zero, &p, &mut rng).unwrap()[0].powi(2))
            .sum::<f64>()
            / n as f64;
        assert!((v - 1.0).abs() < 0.05, "variance {v}");
    }

    #[test]
    fn red_hand_example() {
        let s = FnScore::new(1, |_x: &[f64], _s: f64, out: &mut [f64]| out[0] = -1.0);
        let x = pmc_red_step(&[0.0], &ConstGrad(1.0), &s, &det(0.1, 2.0), &mut RngStream::new(0, 0)).unwrap();
        assert!((x[0] + 0.3).abs() < 1e-15);
    }

    #[test]
    fn pnp_hand_example() {
        let s = FnScore::new(1, |x: &[f64], _s: f64, out: &mut [f64]| out[0] = -x[0]);
        let x = pmc_pnp_step(&[0.0], &ConstGrad(1.0), &s, &det(0.1, 1.0), &mut RngStream::new(0, 0)).unwrap();
        assert!((x[0] + 0.09).abs() < 1e-15);
    }

    #[test]
    fn pnp_equals_red_without_likelihood() {
        let s = FnScore::new(2, |x: &[f64], _s: f64, out: &mut [f64]| {
            out[0] = -x[0] * x[1];
            out[1] = x[0].sin();
        });
        let p = StepParams {
            deterministic: false,
            ..det(0.2, 3.0)
        };
        let flat = FlatLikelihood { dim: 2 };
        let a = pmc_red_step(&[0.4, -1.2], &flat, &s, &p, &mut RngStream::new(7, 3)).unwrap();
        let b = pmc_pnp_step(&[0.4, -1.2], &flat, &s, &p, &mut RngStream::new(7, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_is_reported() {
        let s = FnScore::new(1, |_x: &[f64], _s: f64, out: &mut [f64]| out[0] = f64::INFINITY);
        let r = pmc_red_step(&[0.0], &FlatLikelihood { dim: 1 }, &s, &det(0.1, 1.0), &mut RngStream::new(0, 0));
        assert!(matches!(r, Err(Error::Diverged { .. })));
    }

    #[test]
    fn rejects_invalid_parameters() {
        let s = FnScore::new(1, |_x: &[f64], _s: f64, out: &mut [f64]| out[0] = 0.0);
        let flat = FlatLikelihood { dim: 1 };
        let mut rng = RngStream::new(0, 0);
        assert!(pmc_red_step(&[0.0], &flat, &s, &det(0.0, 1.0), &mut rng).is_err());
        assert!(pmc_red_step(&[0.0], &flat, &s, &det(0.1, 0.5), &mut rng).is_err());
        assert!(pmc_red_step(&[0.0, 1.0], &flat, &s, &det(0.1, 1.0), &mut rng).is_err());
    }
}
