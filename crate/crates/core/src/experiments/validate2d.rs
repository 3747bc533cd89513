//! Random 2D bimodal posteriors with FI/KL traces.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{derive_seed, DiagnosticsSpec, PriorSource, ScoreSpec, EM_STREAM, PROBLEM_STREAM};
use crate::diagnostics::{em_fit_gmm, grid_divergences, EmOptions, GridPosterior};
use crate::error::Result;
use crate::likelihoods::GaussianLinearLikelihood;
use crate::mixture::{Covariance, GaussianMixture};
use crate::priors::ScoreModel;
use crate::rng::RngStream;
use crate::samplers::{run_batch_observed, ChainConfig, SampleBatch};

fn default_prior() -> PriorSource {
    default_mixture().into()
}

/// Two well-separated isotropic modes.
pub fn default_mixture() -> GaussianMixture {
    GaussianMixture::new(
        vec![0.5, 0.5],
        vec![vec![-5.0, -5.0], vec![5.0, 5.0]],
        vec![Covariance::Isotropic(8.0); 2],
    )
    .expect("valid default prior")
}

fn two() -> usize {
    2
}
fn default_a_std() -> f64 {
    0.2
}
fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Validate2dSpec {
    #[serde(default = "default_prior")]
    pub prior: PriorSource,
    /// Rows of the random measurement matrix.
    #[serde(default = "two")]
    pub measurements: usize,
    /// Entry standard deviation of the random measurement matrix.
    #[serde(default = "default_a_std")]
    pub a_std: f64,
    #[serde(default = "one")]
    pub beta: f64,
    /// Point at which the measurements are simulated.
    #[serde(default)]
    pub truth: [f64; 2],
    #[serde(default = "ScoreSpec::noisy_default")]
    pub score: ScoreSpec,
    /// Number of random posteriors (`run` defaults to 1, sweeps to 20).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub realizations: Option<usize>,
}

impl Default for Validate2dSpec {
    fn default() -> Self {
        Self {
            prior: default_prior(),
            measurements: 2,
            a_std: default_a_std(),
            beta: 1.0,
            truth: [0.0, 0.0],
            score: ScoreSpec::noisy_default(),
            realizations: None,
        }
    }
}

/// One random test posterior with its tabulated density.
pub struct Validate2dProblem {
    pub realization: usize,
    pub lik: GaussianLinearLikelihood,
    pub prior: GaussianMixture,
    pub posterior: GridPosterior,
}

impl Validate2dSpec {
    pub fn validate(&self) -> Result<()> {
        let prior = self.prior.mixture()?;
        if prior.dim() != 2 {
            return Err(crate::Error::invalid("validate2d needs a 2D prior"));
        }
        if self.measurements == 0 {
            return Err(crate::Error::invalid("measurements must be at least 1"));
        }
        if !(self.a_std.is_finite() && self.a_std > 0.0) {
            return Err(crate::Error::invalid(format!("a_std must be positive, got {}", self.a_std)));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(crate::Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if self.realizations == Some(0) {
            return Err(crate::Error::invalid("realizations must be at least 1"));
        }
        self.score.build(prior.clone()).map(|_| ())
    }

    /// Likelihood of realization `r`: fresh `A` and noise, everything else fixed.
    pub fn likelihood(&self, master_seed: u64, r: usize) -> Result<GaussianLinearLikelihood> {
        let mut rng = RngStream::new(master_seed, PROBLEM_STREAM + r as u64);
        let m = self.measurements;
        let a = DMatrix::from_fn(m, 2, |_, _| self.a_std * rng.normal());
        GaussianLinearLikelihood::simulate(a, &self.truth, self.beta, &mut rng)
    }

    pub fn problem(&self, master_seed: u64, r: usize, diag: &DiagnosticsSpec) -> Result<Validate2dProblem> {
        let lik = self.likelihood(master_seed, r)?;
        let prior = self.prior.mixture()?.clone();
        let posterior = GridPosterior::new(&lik, &prior, diag.grid)?;
        Ok(Validate2dProblem {
            realization: r,
            lik,
            prior,
            posterior,
        })
    }
}

/// Trace points whose fit puts less mass than this on the grid are not scored.
pub const MIN_GRID_MASS: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub fi: f64,
    pub kl: f64,
    /// Mass of the fitted mixture inside the grid.
    pub nu_mass: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TraceRun {
    pub batch: SampleBatch,
    pub trace: Vec<TracePoint>,
    /// Whether every EM fit had a nondecreasing log-likelihood.
    pub em_monotone: bool,
}

impl TraceRun {
    /// Smallest FI and KL (taken independently) over the trace points whose
    /// fit lies essentially inside the grid.
    pub fn minima(&self) -> (f64, f64) {
        let min = |f: fn(&TracePoint) -> f64| {
            self.trace
                .iter()
                .filter(|t| t.nu_mass >= MIN_GRID_MASS)
                .map(f)
                .filter(|v| v.is_finite())
                .fold(f64::INFINITY, f64::min)
        };
        (min(|t| t.fi), min(|t| t.kl))
    }
}

/// Run the chains on `problem`, fitting a mixture to the live chains every
/// `diag.eval_every` iterations and scoring it against the posterior.
pub fn trace_run(
    problem: &Validate2dProblem,
    chain: &ChainConfig,
    score: &ScoreModel,
    diag: &DiagnosticsSpec,
    master_seed: u64,
) -> Result<TraceRun> {
    let k = diag.components.unwrap_or(problem.prior.n_components());
    let opts = EmOptions {
        restarts: diag.em_restarts,
        ..EmOptions::default()
    };
    let em_rng = RngStream::new(master_seed, EM_STREAM + problem.realization as u64);
    let mut trace = Vec::new();
    let mut em_monotone = true;
    let mut cfg = chain.clone();
    cfg.seed = derive_seed(chain.seed, problem.realization);
    let batch = run_batch_observed(&cfg, &problem.lik, score, diag.eval_every, |state| {
        let samples = state.samples();
        let grid = problem.posterior.grid();
        let inside = samples
            .row_iter()
            .filter(|r| (0..2).all(|a| r[a] >= grid.bounds[a][0] && r[a] <= grid.bounds[a][1]))
            .count();
        if (inside as f64) < MIN_GRID_MASS * samples.nrows() as f64 {
            trace.push(TracePoint {
                iteration: state.iteration,
                fi: f64::NAN,
                kl: f64::NAN,
                nu_mass: inside as f64 / samples.nrows().max(1) as f64,
                warnings: vec!["chains outside the grid; not scored".into()],
            });
            return Ok(());
        }
        let mut rng = em_rng.child(state.iteration as u64);
        let point = match em_fit_gmm(&samples, k, &mut rng, &opts) {
            Ok(fit) => {
                em_monotone &= fit.is_monotone();
                let m = grid_divergences(&fit.mixture, &problem.posterior)?;
                TracePoint {
                    iteration: state.iteration,
                    fi: m.fi,
                    kl: m.kl,
                    nu_mass: m.nu_mass,
                    warnings: m.warnings,
                }
            }
            Err(e) => TracePoint {
                iteration: state.iteration,
                fi: f64::NAN,
                kl: f64::NAN,
                nu_mass: f64::NAN,
                warnings: vec![e.to_string()],
            },
        };
        trace.push(point);
        Ok(())
    })?;
    Ok(TraceRun {
        batch,
        trace,
        em_monotone,
    })
}

pub(crate) fn run(cfg: &super::ExperimentConfig, spec: &Validate2dSpec) -> Result<super::RunOutput> {
    use super::{RunOutput, StatRecord, TraceRow};
    let score = spec.score.build(spec.prior.mixture()?.clone())?;
    let grid = cfg.diagnostics.grid;
    let mut out: Option<RunOutput> = None;
    let (mut sum_fi, mut sum_kl) = (0.0, 0.0);
    let n = spec.realizations.unwrap_or(1);
    let mut monotone = true;
    for r in 0..n {
        let problem = spec.problem(cfg.seed, r, &cfg.diagnostics)?;
        let run = trace_run(&problem, &cfg.chain, &score, &cfg.diagnostics, cfg.seed)?;
        let o = out.get_or_insert_with(|| RunOutput::new(run.batch.samples.clone()));
        monotone &= run.em_monotone;
        let (fi, kl) = run.minima();
        sum_fi += fi;
        sum_kl += kl;
        let mut warnings: Vec<String> = problem.posterior.warnings().to_vec();
        for t in &run.trace {
            o.traces.push(TraceRow {
                realization: r,
                iteration: t.iteration,
                fi: t.fi,
                kl: t.kl,
            });
            warnings.extend(t.warnings.iter().map(|w| format!("iteration {}: {w}", t.iteration)));
        }
        o.records.push(StatRecord::new(format!("min_fi/{r}"), fi).with_grid(grid).with_warnings(warnings.clone()));
        o.records.push(StatRecord::new(format!("min_kl/{r}"), kl).with_grid(grid).with_warnings(warnings));
        if let Some(t) = run.trace.last() {
            o.records.push(StatRecord::new(format!("final_fi/{r}"), t.fi).with_grid(grid));
            o.records.push(StatRecord::new(format!("final_kl/{r}"), t.kl).with_grid(grid));
        }
        o.divergences.extend(run.batch.divergences.iter().cloned());
        if !run.batch.divergences.is_empty() {
            o.warnings.push(format!("realization {r}: {} chains diverged", run.batch.divergences.len()));
        }
    }
    let mut o = out.expect("at least one realization");
    o.records.push(StatRecord::new("mean_min_fi", sum_fi / n as f64).with_grid(grid));
    o.records.push(StatRecord::new("mean_min_kl", sum_kl / n as f64).with_grid(grid));
    o.em_monotone = Some(monotone);
    Ok(o)
}
