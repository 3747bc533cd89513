//! Image-scale experiments: the two-mode Gaussian image posterior and
//! small compressed-sensing and masked-Fourier reconstructions.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{PriorSource, RunOutput, ScoreSpec, PROBLEM_STREAM};
use crate::diagnostics::{classify_modes, conjugate_posterior, psnr_db, sample_stats};
use crate::error::{Error, Result};
use crate::likelihoods::{GaussianLinearLikelihood, Likelihood, MaskedFourierLikelihood, MaskedFourierOperator};
use crate::mixture::{Covariance, GaussianMixture};
use crate::rng::RngStream;
use crate::samplers::{run_batch, ChainConfig, SampleBatch};

/// Ring and crescent templates on a `side × side` grid (row-major, pixel
/// values in `[0, 1]`).
fn templates(side: usize) -> [Vec<f64>; 2] {
    let mut ring = vec![0.0; side * side];
    let mut crescent = vec![0.0; side * side];
    let c = (side as f64 - 1.0) / 2.0;
    for r in 0..side {
        for col in 0..side {
            let u = (col as f64 - c) / side as f64;
            let v = (c - r as f64) / side as f64;
            let rad = (u * u + v * v).sqrt();
            let band = (-(rad - 0.25).powi(2) / (2.0 * 0.06 * 0.06)).exp();
            ring[r * side + col] = band;
            // brighter on one side, fading on the other
            crescent[r * side + col] = band * 0.5 * (1.0 + u.atan2(v).cos());
        }
    }
    [ring, crescent]
}

/// Two-component image prior: a ring and a crescent, each with diagonal
/// covariance `var_bg + var_fg·template` (per pixel). With `flux`, both
/// means are rescaled to that total and the variances by its square.
pub fn shape_prior(side: usize, var_bg: f64, var_fg: f64, flux: Option<f64>) -> Result<GaussianMixture> {
    if side < 2 {
        return Err(Error::invalid("image side must be at least 2"));
    }
    let mut means = Vec::new();
    let mut covs = Vec::new();
    for t in templates(side) {
        let s = flux.map_or(1.0, |f| f / t.iter().sum::<f64>());
        means.push(t.iter().map(|v| v * s).collect());
        covs.push(Covariance::Diagonal(t.iter().map(|v| (var_bg + var_fg * v) * s * s).collect()));
    }
    GaussianMixture::new(vec![0.5, 0.5], means, covs)
}

/// Mode balance and per-mode agreement of samples with an oracle mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    /// Per mode, the fraction of coordinates whose sample mean lies within
    /// three standard errors (`sd/√count`) of the oracle mean; `None` for
    /// modes with fewer than two samples.
    pub within_3se: Vec<Option<f64>>,
}

impl ModeReport {
    pub fn min_fraction(&self) -> f64 {
        self.fractions.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Classify finite sample rows to the nearest oracle component mean and
/// compare per-mode sample means with the oracle means.
pub fn mode_report(samples: &DMatrix<f64>, oracle: &GaussianMixture) -> Result<ModeReport> {
    let a = classify_modes(samples, oracle.means())?;
    let within_3se = (0..oracle.n_components())
        .map(|k| {
            let c = a.counts[k];
            let m = a.modes[k].as_ref().filter(|_| c >= 2)?;
            let (mean, sd) = (&m.mean, &m.sd);
            let se_scale = 3.0 / (c as f64).sqrt();
            let ok = mean
                .iter()
                .zip(sd)
                .zip(&oracle.means()[k])
                .filter(|((m, s), o)| (*m - *o).abs() <= se_scale * **s)
                .count();
            Some(ok as f64 / mean.len() as f64)
        })
        .collect();
    Ok(ModeReport {
        fractions: a.fractions(),
        counts: a.counts,
        within_3se,
    })
}

fn default_side() -> usize {
    32
}
fn default_measurements() -> usize {
    307
}
fn default_prior_var() -> f64 {
    0.1
}
fn default_base_mean() -> f64 {
    0.5
}
fn default_shift() -> f64 {
    2.0
}
fn default_image_beta() -> f64 {
    0.1
}
fn yes() -> bool {
    true
}

/// Two Gaussian modes `μ∓shift·1` around a constant image `μ`, observed
/// through a random Gaussian matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianImageSpec {
    #[serde(default = "default_side")]
    pub side: usize,
    #[serde(default = "default_measurements")]
    pub measurements: usize,
    #[serde(default = "default_prior_var")]
    pub prior_var: f64,
    #[serde(default = "default_base_mean")]
    pub base_mean: f64,
    #[serde(default = "default_shift")]
    pub shift: f64,
    #[serde(default = "default_image_beta")]
    pub beta: f64,
    /// Remove each row's mean so the direction separating the modes is
    /// unobserved and both modes keep equal evidence.
    #[serde(default = "yes")]
    pub zero_sum_rows: bool,
    #[serde(default)]
    pub score: ScoreSpec,
    /// Also run the chains without annealing under the same budget.
    #[serde(default = "yes")]
    pub stationary_baseline: bool,
}

impl Default for GaussianImageSpec {
    fn default() -> Self {
        Self {
            side: default_side(),
            measurements: default_measurements(),
            prior_var: default_prior_var(),
            base_mean: default_base_mean(),
            shift: default_shift(),
            beta: default_image_beta(),
            zero_sum_rows: true,
            score: ScoreSpec::exact(),
            stationary_baseline: true,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive, got {v}")))
    }
}

/// A posterior with a known truth and, when linear, its closed form.
pub struct ImageProblem<L> {
    pub prior: GaussianMixture,
    pub lik: L,
    pub truth: Vec<f64>,
    pub oracle: Option<GaussianMixture>,
}

impl GaussianImageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 2 || self.measurements == 0 {
            return Err(Error::invalid("side must be at least 2 and measurements at least 1"));
        }
        positive("prior_var", self.prior_var)?;
        positive("shift", self.shift)?;
        positive("beta", self.beta)?;
        self.score.build(self.prior()?).map(|_| ())
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn prior(&self) -> Result<GaussianMixture> {
        let n = self.dim();
        GaussianMixture::new(
            vec![0.5, 0.5],
            vec![
                vec![self.base_mean - self.shift; n],
                vec![self.base_mean + self.shift; n],
            ],
            vec![Covariance::Isotropic(self.prior_var); 2],
        )
    }

    pub fn problem(&self, master_seed: u64) -> Result<ImageProblem<GaussianLinearLikelihood>> {
        let n = self.dim();
        let mut rng = RngStream::new(master_seed, PROBLEM_STREAM);
        let scale = 1.0 / (n as f64).sqrt();
        let mut a = DMatrix::from_fn(self.measurements, n, |_, _| scale * rng.normal());
        if self.zero_sum_rows {
            for mut row in a.row_iter_mut() {
                let m = row.mean();
                row.add_scalar_mut(-m);
            }
        }
        let truth = vec![self.base_mean; n];
        let lik = GaussianLinearLikelihood::simulate(a, &truth, self.beta, &mut rng)?;
        let prior = self.prior()?;
        let oracle = conjugate_posterior(&prior, &lik)?;
        Ok(ImageProblem {
            prior,
            lik,
            truth,
            oracle: Some(oracle),
        })
    }
}

/// Stationary counterpart of `chain`: same step size, budget and seed.
pub fn stationary_version(chain: &ChainConfig) -> ChainConfig {
    let mut c = chain.clone();
    c.annealed = false;
    c.schedule = None;
    c.alpha_static = 1.0;
    c.sigma_static = 0.0;
    c
}

fn push_modes(out: &mut RunOutput, prefix: &str, r: &ModeReport) {
    for (k, f) in r.fractions.iter().enumerate() {
        out.push(format!("{prefix}mode_fraction/{k}"), *f);
    }
    for (k, w) in r.within_3se.iter().enumerate() {
        out.push(format!("{prefix}within_3se/{k}"), w.unwrap_or(f64::NAN));
    }
    out.push(format!("{prefix}min_mode_fraction"), r.min_fraction());
}

fn note_divergences(out: &mut RunOutput, label: &str, b: &SampleBatch) {
    if !b.divergences.is_empty() {
        out.warnings.push(format!("{label}: {} chains diverged", b.divergences.len()));
        out.divergences.extend(b.divergences.iter().cloned());
    }
}

pub(crate) fn run_gaussian_image(cfg: &super::ExperimentConfig, spec: &GaussianImageSpec) -> Result<RunOutput> {
    let p = spec.problem(cfg.seed)?;
    let oracle = p.oracle.as_ref().expect("linear problem has an oracle");
    let score = spec.score.build(p.prior.clone())?;
    let batch = run_batch(&cfg.chain, &p.lik, &score)?;
    let mut out = RunOutput::new(batch.samples.clone());
    note_divergences(&mut out, "sampler", &batch);
    for (k, w) in oracle.weights().iter().enumerate() {
        out.push(format!("oracle_weight/{k}"), *w);
    }
    let finite = batch.finite_samples();
    push_modes(&mut out, "", &mode_report(&finite, oracle)?);
    if spec.stationary_baseline && cfg.chain.annealed {
        let stat = run_batch(&stationary_version(&cfg.chain), &p.lik, &score)?;
        note_divergences(&mut out, "stationary baseline", &stat);
        push_modes(&mut out, "stationary_", &mode_report(&stat.finite_samples(), oracle)?);
    }
    Ok(out)
}

fn default_small_side() -> usize {
    16
}
fn default_ratio() -> f64 {
    0.3
}
fn default_recon_beta() -> f64 {
    0.05
}
fn default_var_bg() -> f64 {
    1e-3
}
fn default_var_fg() -> f64 {
    0.02
}

/// Compressed sensing of a small shape image with a Gaussian matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsSpec {
    #[serde(default = "default_small_side")]
    pub side: usize,
    /// Measurements as a fraction of pixels.
    #[serde(default = "default_ratio")]
    pub sampling_ratio: f64,
    #[serde(default = "default_recon_beta")]
    pub beta: f64,
    /// Overrides the built-in ring/crescent prior.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorSource>,
    #[serde(default = "default_var_bg")]
    pub var_bg: f64,
    #[serde(default = "default_var_fg")]
    pub var_fg: f64,
    #[serde(default)]
    pub score: ScoreSpec,
    /// Peak value for PSNR; defaults to the truth's maximum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_ref: Option<f64>,
}

/// Masked-Fourier reconstruction of a small shape image.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MriSpec {
    #[serde(default = "default_small_side")]
    pub side: usize,
    /// Fraction of frequencies kept by the radial mask.
    #[serde(default = "default_ratio")]
    pub fraction: f64,
    #[serde(default = "default_recon_beta")]
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorSource>,
    #[serde(default = "default_var_bg")]
    pub var_bg: f64,
    #[serde(default = "default_var_fg")]
    pub var_fg: f64,
    #[serde(default)]
    pub score: ScoreSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_ref: Option<f64>,
}

macro_rules! recon_defaults {
    ($t:ident, $ratio:ident) => {
        impl Default for $t {
            fn default() -> Self {
                Self {
                    side: default_small_side(),
                    $ratio: default_ratio(),
                    beta: default_recon_beta(),
                    prior: None,
                    var_bg: default_var_bg(),
                    var_fg: default_var_fg(),
                    score: ScoreSpec::exact(),
                    max_ref: None,
                }
            }
        }

        impl $t {
            pub fn prior(&self) -> Result<GaussianMixture> {
                match &self.prior {
                    Some(p) => Ok(p.mixture()?.clone()),
                    None => shape_prior(self.side, self.var_bg, self.var_fg, None),
                }
            }

            pub fn validate(&self) -> Result<()> {
                positive("beta", self.beta)?;
                if !(self.$ratio > 0.0 && self.$ratio <= 1.0) {
                    return Err(Error::invalid(format!(
                        "{} must be in (0, 1], got {}",
                        stringify!($ratio),
                        self.$ratio
                    )));
                }
                if let Some(m) = self.max_ref {
                    positive("max_ref", m)?;
                }
                let prior = self.prior()?;
                crate::check_dim(self.side * self.side, prior.dim())?;
                self.score.build(prior).map(|_| ())
            }
        }
    };
}
recon_defaults!(CsSpec, sampling_ratio);
recon_defaults!(MriSpec, fraction);

fn draw_truth(prior: &GaussianMixture, rng: &mut RngStream) -> Vec<f64> {
    prior.sample(rng)
}

impl CsSpec {
    pub fn problem(&self, master_seed: u64) -> Result<ImageProblem<GaussianLinearLikelihood>> {
        let prior = self.prior()?;
        let n = prior.dim();
        let mut rng = RngStream::new(master_seed, PROBLEM_STREAM);
        let truth = draw_truth(&prior, &mut rng);
        let m = ((self.sampling_ratio * n as f64).round() as usize).max(1);
        let scale = 1.0 / (m as f64).sqrt();
        let a = DMatrix::from_fn(m, n, |_, _| scale * rng.normal());
        let lik = GaussianLinearLikelihood::simulate(a, &truth, self.beta, &mut rng)?;
        let oracle = conjugate_posterior(&prior, &lik)?;
        Ok(ImageProblem {
            prior,
            lik,
            truth,
            oracle: Some(oracle),
        })
    }
}

impl MriSpec {
    pub fn problem(&self, master_seed: u64) -> Result<ImageProblem<MaskedFourierLikelihood>> {
        let prior = self.prior()?;
        let mut rng = RngStream::new(master_seed, PROBLEM_STREAM);
        let truth = draw_truth(&prior, &mut rng);
        let mask = MaskedFourierOperator::radial_mask(self.side, self.side, self.fraction);
        let lik = MaskedFourierLikelihood::simulate((self.side, self.side), mask, &truth, self.beta, &mut rng)?;
        Ok(ImageProblem {
            prior,
            lik,
            truth,
            oracle: None,
        })
    }
}

fn reconstruction<L: Likelihood>(
    cfg: &super::ExperimentConfig,
    p: &ImageProblem<L>,
    score: &ScoreSpec,
    max_ref: Option<f64>,
) -> Result<RunOutput> {
    let model = score.build(p.prior.clone())?;
    let batch = run_batch(&cfg.chain, &p.lik, &model)?;
    let mut out = RunOutput::new(batch.samples.clone());
    note_divergences(&mut out, "sampler", &batch);
    let max_ref = max_ref.unwrap_or_else(|| p.truth.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let finite = batch.finite_samples();
    if finite.nrows() >= 2 {
        let st = sample_stats(&finite, &p.truth, max_ref)?;
        out.push("psnr_db", st.psnr_db);
        out.push("nll", st.nll);
        out.push("coverage3sd", st.coverage3sd);
        out.push("mse", st.mse);
    } else {
        out.warnings.push("fewer than two finite chains; no statistics".into());
    }
    if let Some(o) = &p.oracle {
        let mean = o.mean();
        let n = mean.len() as f64;
        let mse = mean.iter().zip(&p.truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        out.push("oracle_psnr_db", psnr_db(max_ref, mse));
    }
    Ok(out)
}

pub(crate) fn run_cs(cfg: &super::ExperimentConfig, spec: &CsSpec) -> Result<RunOutput> {
    reconstruction(cfg, &spec.problem(cfg.seed)?, &spec.score, spec.max_ref)
}

pub(crate) fn run_mri(cfg: &super::ExperimentConfig, spec: &MriSpec) -> Result<RunOutput> {
    reconstruction(cfg, &spec.problem(cfg.seed)?, &spec.score, spec.max_ref)
}
