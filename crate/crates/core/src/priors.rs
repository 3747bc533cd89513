//! Score models of the smoothed prior `p_σ`.
//!
//! [`ScoreModel`] wraps a Gaussian-mixture prior and returns either its exact
//! smoothed score or a noisy version of it whose error norm is bounded by
//! `eps_max`, mimicking an imperfect learned score. An optional clip radius
//! `r_s` bounds the output norm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::rng::RngStream;
use crate::{check_dim, clip_norm, norm};

/// Anything that can produce an (approximate) smoothed-prior score.
///
/// Implementations must be pure given `(x, sigma, rng)`; the sampler calls
/// them concurrently from different chains, each with its own stream.
pub trait Score: Sync {
    fn dim(&self) -> usize;

    /// Write `S(x, sigma)` into `out`. Inputs are assumed validated.
    fn score_into(&self, x: &[f64], sigma: f64, rng: &mut RngStream, out: &mut [f64]);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    ExactGmm,
    NoisyGmm,
}

/// Analytic (optionally perturbed and clipped) score of a Gaussian mixture.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "ScoreModelDocument", into = "ScoreModelDocument")]
pub struct ScoreModel {
    kind: ScoreKind,
    base: GaussianMixture,
    eps_max: f64,
    noise_std: Option<f64>,
    r_s: Option<f64>,
}

impl ScoreModel {
    pub fn exact(base: GaussianMixture) -> Self {
        Self {
            kind: ScoreKind::ExactGmm,
            base,
            eps_max: 0.0,
            noise_std: None,
            r_s: None,
        }
    }

    /// Exact score plus Gaussian noise truncated to norm `eps_max`.
    pub fn noisy(base: GaussianMixture, eps_max: f64) -> Result<Self> {
        if !(eps_max.is_finite() && eps_max >= 0.0) {
            return Err(Error::invalid(format!("eps_max must be nonnegative, got {eps_max}")));
        }
        Ok(Self {
            kind: ScoreKind::NoisyGmm,
            base,
            eps_max,
            noise_std: None,
            r_s: None,
        })
    }

    /// Per-coordinate standard deviation of the untruncated noise. Defaults
    /// to `eps_max / √n`.
    pub fn with_noise_std(mut self, std: f64) -> Result<Self> {
        if !(std.is_finite() && std >= 0.0) {
            return Err(Error::invalid(format!("noise std must be nonnegative, got {std}")));
        }
        self.noise_std = Some(std);
        Ok(self)
    }

    pub fn with_clip(mut self, r_s: f64) -> Result<Self> {
        if !(r_s.is_finite() && r_s > 0.0) {
            return Err(Error::invalid(format!("score clip radius must be positive, got {r_s}")));
        }
        self.r_s = Some(r_s);
        Ok(self)
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn base(&self) -> &GaussianMixture {
        &self.base
    }

    pub fn eps_max(&self) -> f64 {
        self.eps_max
    }

    pub fn clip_radius(&self) -> Option<f64> {
        self.r_s
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
            .unwrap_or(self.eps_max / (self.base.dim() as f64).sqrt())
    }

    /// Checked evaluation of `S(x, σ)`.
    pub fn smoothed_score(&self, x: &[f64], sigma: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
        check_dim(self.base.dim(), x.len())?;
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::invalid(format!("sigma must be nonnegative, got {sigma}")));
        }
        let mut out = vec![0.0; x.len()];
        self.score_into(x, sigma, rng, &mut out);
        Ok(out)
    }
}

impl Score for ScoreModel {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn score_into(&self, x: &[f64], sigma: f64, rng: &mut RngStream, out: &mut [f64]) {
        self.base.evaluate(x, sigma * sigma, Some(out), None);
        if self.kind == ScoreKind::NoisyGmm && self.eps_max > 0.0 {
            let std = self.noise_std();
            let mut e = vec![0.0; out.len()];
            for v in e.iter_mut() {
                *v = std * rng.normal();
            }
            // truncate, don't project: draws inside the ball are kept as is
            if norm(&e) > self.eps_max {
                clip_norm(&mut e, self.eps_max);
            }
            out.iter_mut().zip(&e).for_each(|(o, v)| *o += v);
        }
        if let Some(r) = self.r_s {
            clip_norm(out, r);
        }
    }
}

/// Adapter turning a closure `(x, sigma, out)` into a deterministic [`Score`].
pub struct FnScore<F> {
    dim: usize,
    f: F,
}

impl<F> FnScore<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Score for FnScore<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_into(&self, x: &[f64], sigma: f64, _rng: &mut RngStream, out: &mut [f64]) {
        (self.f)(x, sigma, out)
    }
}

/// MMSE denoiser `E[z | x]` for `z ~ gmm`, `x = z + N(0, σ²I)`.
pub fn mmse_denoise(gmm: &GaussianMixture, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    check_dim(gmm.dim(), x.len())?;
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("denoiser needs sigma > 0, got {sigma}")));
    }
    let s2 = sigma * sigma;
    let resp = gmm.responsibilities(x, sigma)?;
    let n = gmm.dim();
    let mut out = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut shrunk = vec![0.0; n];
    for (k, r) in resp.iter().enumerate() {
        if *r == 0.0 {
            continue;
        }
        let m = &gmm.means()[k];
        d.iter_mut().zip(x).zip(m).for_each(|((di, xi), mi)| *di = xi - mi);
        gmm.covariances()[k].shrink(&d, s2, &mut shrunk);
        for ((o, mi), si) in out.iter_mut().zip(m).zip(&shrunk) {
            *o += r * (mi + si);
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ScoreModelDocument {
    kind: ScoreKind,
    prior: GaussianMixture,
    #[serde(default)]
    eps_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_s: Option<f64>,
}

impl TryFrom<ScoreModelDocument> for ScoreModel {
    type Error = Error;

    fn try_from(d: ScoreModelDocument) -> Result<Self> {
        let mut m = match d.kind {
            ScoreKind::ExactGmm => ScoreModel::exact(d.prior),
            ScoreKind::NoisyGmm => ScoreModel::noisy(d.prior, d.eps_max)?,
        };
        if let Some(s) = d.noise_std {
            m = m.with_noise_std(s)?;
        }
        if let Some(r) = d.r_s {
            m = m.with_clip(r)?;
        }
        Ok(m)
    }
}

impl From<ScoreModel> for ScoreModelDocument {
    fn from(m: ScoreModel) -> Self {
        ScoreModelDocument {
            kind: m.kind,
            prior: m.base,
            eps_max: m.eps_max,
            noise_std: m.noise_std,
            r_s: m.r_s,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::Covariance;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn bimodal_2d() -> GaussianMixture {
        GaussianMixture::new(
            vec![0.35, 0.65],
            vec![vec![-2.0, 1.0], vec![3.0, -1.0]],
            vec![
                Covariance::full(DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.7])).unwrap(),
                Covariance::Diagonal(vec![0.5, 1.5]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn inflated_variance_example() {
        let g = GaussianMixture::gaussian(vec![0.0], Covariance::Isotropic(1.0)).unwrap();
        let m = ScoreModel::exact(g);
        let mut rng = RngStream::new(0, 0);
        assert_abs_diff_eq!(m.smoothed_score(&[2.0], 1.0, &mut rng).unwrap()[0], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_smoothing_is_plain_score() {
        let g = bimodal_2d();
        let m = ScoreModel::exact(g.clone());
        let mut rng = RngStream::new(0, 0);
        let x = [0.4, -0.3];
        assert_eq!(m.smoothed_score(&x, 0.0, &mut rng).unwrap(), g.score(&x).unwrap());
    }

    #[test]
    fn negative_sigma_rejected() {
        let m = ScoreModel::exact(bimodal_2d());
        let mut rng = RngStream::new(0, 0);
        assert!(m.smoothed_score(&[0.0, 0.0], -0.1, &mut rng).is_err());
        assert!(mmse_denoise(m.base(), &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn noise_is_bounded_and_nonzero() {
        let g = bimodal_2d();
        let exact = ScoreModel::exact(g.clone());
        let noisy = ScoreModel::noisy(g, 5.0).unwrap();
        let mut rng = RngStream::new(3, 1);
        let mut dummy = RngStream::new(0, 0);
        let mut mean_norm = 0.0;
        for i in 0..10_000 {
            let x = [(i % 17) as f64 * 0.3 - 2.0, (i % 11) as f64 * 0.4 - 2.0];
            let a = noisy.smoothed_score(&x, 0.5, &mut rng).unwrap();
            let b = exact.smoothed_score(&x, 0.5, &mut dummy).unwrap();
            let d = norm(&[a[0] - b[0], a[1] - b[1]]);
            assert!(d <= 5.0 + 1e-12);
            mean_norm += d / 10_000.0;
        }
        assert!(mean_norm > 0.0);
    }

    #[test]
    fn zero_eps_is_bit_identical_to_exact() {
        let g = bimodal_2d();
        let exact = ScoreModel::exact(g.clone());
        let noisy = ScoreModel::noisy(g, 0.0).unwrap();
        let mut r1 = RngStream::new(5, 0);
        let mut r2 = RngStream::new(5, 0);
        for i in 0..50 {
            let x = [i as f64 * 0.1 - 2.0, 1.0 - i as f64 * 0.05];
            let a = exact.smoothed_score(&x, 0.3, &mut r1).unwrap();
            let b = noisy.smoothed_score(&x, 0.3, &mut r2).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn clipping_bounds_output() {
        let m = ScoreModel::noisy(bimodal_2d(), 2.0).unwrap().with_clip(0.75).unwrap();
        let mut rng = RngStream::new(8, 8);
        for i in 0..500 {
            let x = [i as f64 * 0.1 - 25.0, 10.0];
            let s = m.smoothed_score(&x, 0.1, &mut rng).unwrap();
            assert!(norm(&s) <= 0.75 + 1e-12);
        }
    }

    #[test]
    fn denoiser_examples() {
        let g = GaussianMixture::gaussian(vec![0.0], Covariance::Isotropic(1.0)).unwrap();
        assert_abs_diff_eq!(mmse_denoise(&g, &[2.0], 1.0).unwrap()[0], 1.0, epsilon = 1e-15);

        let sep = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![-50.0, 0.0], vec![50.0, 0.0]],
            vec![Covariance::Isotropic(1.0), Covariance::Isotropic(1.0)],
        )
        .unwrap();
        let out = mmse_denoise(&sep, &[50.0, 0.0], 0.5).unwrap();
        assert_abs_diff_eq!(out[0], 50.0, epsilon = 1e-6);
        assert_abs_diff_eq!(out[1], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn tweedie_identity() {
        let g = bimodal_2d();
        let mut rng = RngStream::new(21, 0);
        for _ in 0..200 {
            let x = [rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)];
            let sigma = rng.uniform(0.05, 3.0);
            let den = mmse_denoise(&g, &x, sigma).unwrap();
            let s = g.smoothed_score(&x, sigma).unwrap();
            for i in 0..2 {
                let t = (den[i] - x[i]) / (sigma * sigma);
                assert!((t - s[i]).abs() <= 1e-8 * s[i].abs().max(1.0), "{t} vs {}", s[i]);
            }
        }
    }

    #[test]
    fn smoothed_score_converges_as_sigma_shrinks() {
        let g = bimodal_2d();
        let mut rng = RngStream::new(4, 4);
        for _ in 0..20 {
            let x = [rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0)];
            let s0 = g.score(&x).unwrap();
            let errs: Vec<f64> = [1.0, 0.5, 0.25, 0.125]
                .iter()
                .map(|&s| {
                    let v = g.smoothed_score(&x, s).unwrap();
                    norm(&[v[0] - s0[0], v[1] - s0[1]])
                })
                .collect();
            assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
        }
    }

    #[test]
    fn document_round_trip() {
        let m = ScoreModel::noisy(bimodal_2d(), 2.5).unwrap().with_clip(10.0).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: ScoreModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back.kind(), ScoreKind::NoisyGmm);
        assert_eq!(back.eps_max(), 2.5);
        assert_eq!(back.clip_radius(), Some(10.0));
        assert_abs_diff_eq!(back.noise_std(), 2.5 / 2f64.sqrt(), epsilon = 1e-15);
    }
}
