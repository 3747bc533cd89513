//! Closure-quantity imaging of a small ring/crescent source.

use serde::{Deserialize, Serialize};

use super::image::shape_prior;
use super::{CsvTable, PriorSource, RunOutput, ScoreSpec, PROBLEM_STREAM};
use crate::diagnostics::classify_modes;
use crate::error::{Error, Result};
use crate::likelihoods::{closure_noise_levels, simulate_measurements, ClosureLikelihood, ClosureSystem, TelescopeArray};
use crate::mixture::GaussianMixture;
use crate::rng::RngStream;
use crate::samplers::run_batch;

fn d_side() -> usize {
    16
}
fn d_telescopes() -> usize {
    9
}
fn d_times() -> usize {
    4
}
fn d_radius() -> f64 {
    4.0
}
fn d_rotation() -> f64 {
    0.2
}
fn d_gain() -> f64 {
    0.1
}
fn d_phase() -> f64 {
    1.0
}
fn d_thermal() -> f64 {
    0.01
}
fn d_rho() -> f64 {
    0.5
}
fn d_flux() -> f64 {
    1.0
}
fn d_var_bg() -> f64 {
    1e-3
}
fn d_var_fg() -> f64 {
    0.02
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BhiSpec {
    #[serde(default = "d_side")]
    pub side: usize,
    #[serde(default = "d_telescopes")]
    pub telescopes: usize,
    #[serde(default = "d_times")]
    pub times: usize,
    /// Radius of the disk the telescopes are drawn from (cycles per field).
    #[serde(default = "d_radius")]
    pub array_radius: f64,
    #[serde(default = "d_rotation")]
    pub rotation_step: f64,
    #[serde(default = "d_gain")]
    pub gain_std: f64,
    #[serde(default = "d_phase")]
    pub phase_std: f64,
    /// Thermal noise std as a fraction of the total flux.
    #[serde(default = "d_thermal")]
    pub thermal_frac: f64,
    #[serde(default = "d_rho")]
    pub rho: f64,
    #[serde(default = "d_flux")]
    pub flux: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorSource>,
    /// Background and template variance of the built-in prior, relative to
    /// the flux-normalized templates.
    #[serde(default = "d_var_bg")]
    pub var_bg: f64,
    #[serde(default = "d_var_fg")]
    pub var_fg: f64,
    #[serde(default)]
    pub score: ScoreSpec,
}

impl Default for BhiSpec {
    fn default() -> Self {
        Self {
            side: d_side(),
            telescopes: d_telescopes(),
            times: d_times(),
            array_radius: d_radius(),
            rotation_step: d_rotation(),
            gain_std: d_gain(),
            phase_std: d_phase(),
            thermal_frac: d_thermal(),
            rho: d_rho(),
            flux: d_flux(),
            prior: None,
            var_bg: d_var_bg(),
            var_fg: d_var_fg(),
            score: ScoreSpec::exact(),
        }
    }
}

/// A simulated closure problem and the truth behind it.
pub struct BhiProblem {
    pub prior: GaussianMixture,
    pub lik: ClosureLikelihood,
    pub truth: Vec<f64>,
}

impl BhiSpec {
    pub fn prior(&self) -> Result<GaussianMixture> {
        match &self.prior {
            Some(p) => Ok(p.mixture()?.clone()),
            None => shape_prior(self.side, self.var_bg, self.var_fg, Some(self.flux)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.telescopes < 4 || self.times == 0 {
            return Err(Error::invalid("bhi needs at least 4 telescopes and 1 time step"));
        }
        for (name, v) in [("array_radius", self.array_radius), ("thermal_frac", self.thermal_frac), ("flux", self.flux)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("gain_std", self.gain_std), ("phase_std", self.phase_std), ("rho", self.rho)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be nonnegative, got {v}")));
            }
        }
        let prior = self.prior()?;
        crate::check_dim(self.side * self.side, prior.dim())?;
        self.score.build(prior).map(|_| ())
    }

    /// Draw the array and the truth, set the closure noise from the thermal
    /// level, and simulate corrupted data.
    pub fn problem(&self, master_seed: u64) -> Result<BhiProblem> {
        let prior = self.prior()?;
        let mut rng = RngStream::new(master_seed, PROBLEM_STREAM);
        let truth = prior.sample(&mut rng);
        let array = TelescopeArray::synthetic(self.telescopes, self.array_radius, self.times, self.rotation_step, &mut rng);
        let shape = (self.side, self.side);
        let thermal = self.thermal_frac * self.flux;
        let base = ClosureSystem::from_array(&array, shape, 1.0, 1.0, self.rho)?;
        let (b_cph, b_camp) = closure_noise_levels(&base, &truth, thermal)?;
        let system = base.with_noise(b_cph, b_camp)?;
        let lik = simulate_measurements(&truth, &system, self.gain_std, self.phase_std, thermal, &mut rng)?;
        Ok(BhiProblem { prior, lik, truth })
    }
}

pub(crate) fn run(cfg: &super::ExperimentConfig, spec: &BhiSpec) -> Result<RunOutput> {
    let p = spec.problem(cfg.seed)?;
    let score = spec.score.build(p.prior.clone())?;
    let batch = run_batch(&cfg.chain, &p.lik, &score)?;
    let mut out = RunOutput::new(batch.samples.clone());
    if !batch.divergences.is_empty() {
        out.warnings.push(format!("{} chains diverged", batch.divergences.len()));
        out.divergences = batch.divergences.clone();
    }
    let (t_cph, t_camp) = p.lik.reduced_chi2(&p.truth)?;
    out.push("truth_chi2_cph", t_cph);
    out.push("truth_chi2_camp", t_camp);

    let finite = batch.finite_samples();
    if finite.nrows() == 0 {
        out.warnings.push("every chain diverged; no chi-square statistics".into());
        return Ok(out);
    }
    let modes = classify_modes(&finite, p.prior.means())?;
    let k = p.prior.n_components();
    let mut rows = Vec::with_capacity(finite.nrows());
    let mut sums = vec![(0.0, 0.0, 0usize); k];
    let chains: Vec<usize> = (0..batch.batch()).filter(|&c| !batch.is_diverged(c)).collect();
    for (i, row) in finite.row_iter().enumerate() {
        let x: Vec<f64> = row.iter().copied().collect();
        let (c, a) = p.lik.reduced_chi2(&x)?;
        let m = modes.labels[i];
        sums[m].0 += c;
        sums[m].1 += a;
        sums[m].2 += 1;
        rows.push(vec![chains[i] as f64, m as f64, c, a]);
    }
    let n = rows.len() as f64;
    let cph = rows.iter().map(|r| r[2]).sum::<f64>() / n;
    let camp = rows.iter().map(|r| r[3]).sum::<f64>() / n;
    out.push("chi2_cph", cph);
    out.push("chi2_camp", camp);
    out.push("chi2_mean", 0.5 * (cph + camp));
    for (m, (c, a, cnt)) in sums.iter().enumerate() {
        let cnt = *cnt as f64;
        out.push(format!("mode_fraction/{m}"), cnt / n);
        out.push(format!("chi2_cph/{m}"), if cnt > 0.0 { c / cnt } else { f64::NAN });
        out.push(format!("chi2_camp/{m}"), if cnt > 0.0 { a / cnt } else { f64::NAN });
    }
    out.tables.push(CsvTable {
        name: "chi2.csv".into(),
        header: ["chain", "mode", "chi2_cph", "chi2_camp"].map(String::from).to_vec(),
        rows,
    });
    Ok(out)
}
