//! Batch chain runner.
//!
//! The batch state is an `n × batch` matrix with one column per chain so
//! that likelihood gradients can be evaluated for all chains at once.
//! Chain `i` draws everything (initialization, score noise, Langevin
//! increments) from `RngStream::new(seed, i)`, so results do not depend on
//! execution order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::schedule::AnnealingSchedule;
use super::step::{langevin_update, StepParams};
use crate::error::{Error, Result};
use crate::likelihoods::Likelihood;
use crate::priors::Score;
use crate::rng::RngStream;
use crate::{check_dim, sha256_hex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    /// Score evaluated at the likelihood-shifted iterate.
    Pnp,
    /// Score evaluated at the current iterate.
    Red,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub gamma: f64,
    pub n_iters: usize,
    pub batch: usize,
    pub seed: u64,
    pub discretization: Discretization,
    #[serde(default)]
    pub annealed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<AnnealingSchedule>,
    /// Prior weight for stationary runs.
    #[serde(default = "one")]
    pub alpha_static: f64,
    /// Smoothing level for stationary runs.
    #[serde(default)]
    pub sigma_static: f64,
    #[serde(default)]
    pub deterministic: bool,
    /// Chains start i.i.d. uniform on `[lo, hi]` per coordinate.
    pub init_box: [f64; 2],
    /// Keep a snapshot of all chains every this many iterations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_every: Option<usize>,
}

impl ChainConfig {
    /// Stationary configuration with unit prior weight and exact score level.
    pub fn stationary(gamma: f64, n_iters: usize, batch: usize, seed: u64, discretization: Discretization) -> Self {
        Self {
            gamma,
            n_iters,
            batch,
            seed,
            discretization,
            annealed: false,
            schedule: None,
            alpha_static: 1.0,
            sigma_static: 0.0,
            deterministic: false,
            init_box: [-1.0, 1.0],
            record_every: None,
        }
    }

    pub fn with_schedule(mut self, schedule: AnnealingSchedule) -> Self {
        self.annealed = true;
        self.schedule = Some(schedule);
        self
    }

    pub fn with_init_box(mut self, lo: f64, hi: f64) -> Self {
        self.init_box = [lo, hi];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.n_iters == 0 {
            return Err(Error::invalid("n_iters must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be at least 1"));
        }
        if self.annealed && self.schedule.is_none() {
            return Err(Error::invalid("annealed runs need a schedule"));
        }
        if !(self.alpha_static.is_finite() && self.alpha_static >= 1.0) {
            return Err(Error::invalid(format!("alpha_static must be at least 1, got {}", self.alpha_static)));
        }
        if !(self.sigma_static.is_finite() && self.sigma_static >= 0.0) {
            return Err(Error::invalid(format!("sigma_static must be nonnegative, got {}", self.sigma_static)));
        }
        let [lo, hi] = self.init_box;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!("init_box must satisfy lo < hi, got [{lo}, {hi}]")));
        }
        if self.record_every == Some(0) {
            return Err(Error::invalid("record_every must be at least 1"));
        }
        Ok(())
    }

    /// Step parameters used at iteration `k`.
    pub fn params_at(&self, k: usize) -> StepParams {
        let (sigma, alpha) = match (&self.schedule, self.annealed) {
            (Some(s), true) => s.at(k),
            _ => (self.sigma_static, self.alpha_static),
        };
        StepParams {
            gamma: self.gamma,
            sigma,
            alpha,
            deterministic: self.deterministic,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub chain: usize,
    pub iteration: usize,
}

/// All chains after `iteration` updates (rows are chains; diverged rows NaN).
#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    pub iteration: usize,
    pub samples: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct SampleBatch {
    /// `batch × n` final iterates; rows of diverged chains are NaN.
    pub samples: DMatrix<f64>,
    pub config_digest: String,
    pub seed: u64,
    pub divergences: Vec<Divergence>,
    pub trajectory: Vec<TrajectoryRecord>,
    pub wall_clock_secs: f64,
}

/// JSON sidecar written next to the samples CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchMetadata {
    pub config_digest: String,
    pub seed: u64,
    pub batch: usize,
    pub dim: usize,
    pub divergences: Vec<Divergence>,
    pub wall_clock_secs: f64,
}

impl SampleBatch {
    pub fn batch(&self) -> usize {
        self.samples.nrows()
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_diverged(&self, chain: usize) -> bool {
        self.divergences.iter().any(|d| d.chain == chain)
    }

    /// Rows of chains that did not diverge.
    pub fn finite_samples(&self) -> DMatrix<f64> {
        finite_rows(&self.samples)
    }

    pub fn metadata(&self) -> BatchMetadata {
        BatchMetadata {
            config_digest: self.config_digest.clone(),
            seed: self.seed,
            batch: self.batch(),
            dim: self.dim(),
            divergences: self.divergences.clone(),
            wall_clock_secs: self.wall_clock_secs,
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_matrix_csv(&self.samples, path)
    }

    pub fn write_sidecar(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(f, &self.metadata())?;
        Ok(())
    }
}

fn finite_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let keep: Vec<usize> = (0..m.nrows()).filter(|&i| m.row(i).iter().all(|v| v.is_finite())).collect();
    DMatrix::from_fn(keep.len(), m.ncols(), |i, j| m[(keep[i], j)])
}

/// Rows as CSV with header `x0,x1,…`; floats in shortest round-trip form.
pub fn write_matrix_csv(m: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..m.ncols()).map(|j| format!("x{j}")).collect();
    writeln!(f, "{}", header.join(","))?;
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Inverse of [`write_matrix_csv`].
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| Error::invalid("empty sample file"))??;
    let n = if header.is_empty() { 0 } else { header.split(',').count() };
    let mut data = Vec::new();
    let mut rows = 0;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 2)))?;
        check_dim(n, vals.len())?;
        data.extend(vals);
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, n, &data))
}

/// Live view of the chains handed to observers.
pub struct ChainState<'a> {
    /// Number of completed updates.
    pub iteration: usize,
    /// `n × batch`, one column per chain.
    pub x: &'a DMatrix<f64>,
    pub alive: &'a [bool],
}

impl ChainState<'_> {
    /// Rows of the live chains (`alive × n`).
    pub fn samples(&self) -> DMatrix<f64> {
        let cols: Vec<usize> = (0..self.x.ncols()).filter(|&j| self.alive[j]).collect();
        DMatrix::from_fn(cols.len(), self.x.nrows(), |i, k| self.x[(k, cols[i])])
    }
}

pub fn run_batch<L, S>(cfg: &ChainConfig, lik: &L, score: &S) -> Result<SampleBatch>
where
    L: Likelihood + ?Sized,
    S: Score + ?Sized,
{
    run_batch_observed(cfg, lik, score, 0, |_| Ok(()))
}

/// Like [`run_batch`], additionally calling `observer` after every
/// `every`-th update (`every = 0` disables it).
pub fn run_batch_observed<L, S, F>(cfg: &ChainConfig, lik: &L, score: &S, every: usize, mut observer: F) -> Result<SampleBatch>
where
    L: Likelihood + ?Sized,
    S: Score + ?Sized,
    F: FnMut(&ChainState) -> Result<()>,
{
    cfg.validate()?;
    let n = lik.dim();
    check_dim(n, score.dim())?;
    let start = Instant::now();
    let b = cfg.batch;
    let [lo, hi] = cfg.init_box;

    let mut rngs: Vec<RngStream> = (0..b).map(|i| RngStream::new(cfg.seed, i as u64)).collect();
    let mut x = DMatrix::<f64>::zeros(n, b);
    for (col, rng) in x.as_mut_slice().chunks_exact_mut(n).zip(rngs.iter_mut()) {
        col.iter_mut().for_each(|v| *v = rng.uniform(lo, hi));
    }
    let mut g = DMatrix::<f64>::zeros(n, b);
    let mut alive = vec![true; b];
    let mut divergences = Vec::new();
    let mut trajectory = Vec::new();

    for k in 0..cfg.n_iters {
        let p = cfg.params_at(k);
        let grad_ok = batch_gradients(lik, &x, &mut g, &alive);
        let shifted = cfg.discretization == Discretization::Pnp;
        let ok: Vec<bool> = x
            .as_mut_slice()
            .par_chunks_mut(n)
            .zip(g.as_slice().par_chunks(n))
            .zip(rngs.par_iter_mut())
            .zip(alive.par_iter().zip(grad_ok.par_iter()))
            .map(|(((xc, gc), rng), (&live, &gok))| {
                if !live {
                    return true;
                }
                if !gok {
                    return false;
                }
                let mut s = vec![0.0; n];
                if shifted {
                    let u: Vec<f64> = xc.iter().zip(gc).map(|(a, d)| a - p.gamma * d).collect();
                    score.score_into(&u, p.sigma, rng, &mut s);
                } else {
                    score.score_into(xc, p.sigma, rng, &mut s);
                }
                let before = xc.to_vec();
                if langevin_update(xc, gc, &s, &p, rng) {
                    true
                } else {
                    // keep the last finite state so later batch gradients stay finite
                    xc.copy_from_slice(&before);
                    false
                }
            })
            .collect();
        for (chain, good) in ok.into_iter().enumerate() {
            if alive[chain] && !good {
                alive[chain] = false;
                divergences.push(Divergence { chain, iteration: k });
            }
        }
        let done = k + 1;
        if let Some(r) = cfg.record_every {
            if done % r == 0 {
                trajectory.push(TrajectoryRecord {
                    iteration: done,
                    samples: to_rows(&x, &alive),
                });
            }
        }
        if every > 0 && done % every == 0 {
            observer(&ChainState {
                iteration: done,
                x: &x,
                alive: &alive,
            })?;
        }
    }

    Ok(SampleBatch {
        samples: to_rows(&x, &alive),
        config_digest: cfg.digest(),
        seed: cfg.seed,
        divergences,
        trajectory,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Gradients of all chains; falls back to per-chain evaluation when the
/// batched call fails, returning which chains produced a gradient.
fn batch_gradients<L: Likelihood + ?Sized>(lik: &L, x: &DMatrix<f64>, g: &mut DMatrix<f64>, alive: &[bool]) -> Vec<bool> {
    if lik.grad_batch(x, g).is_ok() {
        return vec![true; alive.len()];
    }
    let n = x.nrows();
    x.as_slice()
        .par_chunks(n)
        .zip(g.as_mut_slice().par_chunks_mut(n))
        .zip(alive.par_iter())
        .map(|((xc, gc), &live)| !live || lik.grad_into(xc, gc).is_ok())
        .collect()
}

fn to_rows(x: &DMatrix<f64>, alive: &[bool]) -> DMatrix<f64> {
    let mut out = x.transpose();
    for (i, &live) in alive.iter().enumerate() {
        if !live {
            out.row_mut(i).fill(f64::NAN);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihoods::{FlatLikelihood, GaussianLinearLikelihood};
    use crate::mixture::{Covariance, GaussianMixture};
    use crate::priors::{FnScore, ScoreModel};

    fn conjugate_1d() -> (GaussianLinearLikelihood, ScoreModel) {
        let lik = GaussianLinearLikelihood::new(DMatrix::from_element(1, 1, 1.0), vec![2.0], 1.0).unwrap();
        let prior = GaussianMixture::gaussian(vec![0.0], Covariance::Isotropic(1.0)).unwrap();
        (lik, ScoreModel::exact(prior))
    }

    #[test]
    fn reproducible_and_shaped() {
        let (lik, score) = conjugate_1d();
        let cfg = ChainConfig::stationary(0.05, 50, 16, 3, Discretization::Pnp).with_init_box(-50.0, 50.0);
        let a = run_batch(&cfg, &lik, &score).unwrap();
        let b = run_batch(&cfg, &lik, &score).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!((a.batch(), a.dim()), (16, 1));
        assert!(a.samples.iter().all(|v| v.is_finite()));
        assert_eq!(a.config_digest, cfg.digest());
    }

    #[test]
    fn zero_iterations_rejected() {
        let (lik, score) = conjugate_1d();
        let cfg = ChainConfig::stationary(0.05, 0, 4, 0, Discretization::Red);
        assert!(run_batch(&cfg, &lik, &score).is_err());
        let cfg = ChainConfig::stationary(0.05, 5, 0, 0, Discretization::Red);
        assert!(cfg.validate().is_err());
        let mut cfg = ChainConfig::stationary(0.05, 5, 1, 0, Discretization::Red);
        cfg.annealed = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn conjugate_posterior_moments() {
        let (lik, score) = conjugate_1d();
        for d in [Discretization::Pnp, Discretization::Red] {
            let cfg = ChainConfig::stationary(1e-2, 2_000, 400, 11, d).with_init_box(-3.0, 3.0);
            let s = run_batch(&cfg, &lik, &score).unwrap().samples;
            let m = s.mean();
            let v = s.variance();
            assert!((m - 1.0).abs() < 3.0 * (0.5f64 / 400.0).sqrt(), "{d:?} mean {m}");
            assert!((v - 0.5).abs() < 0.1, "{d:?} variance {v}");
        }
    }

    #[test]
    fn annealing_with_constant_schedule_matches_stationary() {
        let prior = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![vec![-1.0, 0.5], vec![2.0, 1.0]],
            vec![Covariance::Isotropic(0.5), Covariance::Diagonal(vec![1.0, 0.3])],
        )
        .unwrap();
        let score = ScoreModel::noisy(prior, 0.5).unwrap();
        let lik = GaussianLinearLikelihood::new(DMatrix::from_row_slice(1, 2, &[1.0, -1.0]), vec![0.3], 0.7).unwrap();
        let sigma = 0.3;
        let mut stat = ChainConfig::stationary(0.05, 200, 8, 5, Discretization::Pnp);
        stat.sigma_static = sigma;
        let ann = stat
            .clone()
            .with_schedule(AnnealingSchedule::new(sigma, 0.9, sigma, 1.0 / (sigma * sigma)).unwrap());
        let a = run_batch(&stat, &lik, &score).unwrap();
        let b = run_batch(&ann, &lik, &score).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn deterministic_red_descends_the_objective() {
        let prior = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![-2.0, 0.0], vec![2.0, 1.0]],
            vec![Covariance::Isotropic(1.0), Covariance::Isotropic(0.5)],
        )
        .unwrap();
        let lik = GaussianLinearLikelihood::new(DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), vec![1.0], 1.0).unwrap();
        let score = ScoreModel::exact(prior.clone());
        let sigma = 0.5;
        let objective = |x: &[f64]| lik.value(x).unwrap() - prior.smoothed_logpdf(x, sigma).unwrap();
        let mut cfg = ChainConfig::stationary(0.01, 1, 1, 0, Discretization::Red);
        cfg.deterministic = true;
        cfg.sigma_static = sigma;
        let mut x = vec![3.0, -4.0];
        let mut rng = RngStream::new(0, 0);
        let p = cfg.params_at(0);
        let mut prev = objective(&x);
        for _ in 0..500 {
            x = crate::samplers::pmc_red_step(&x, &lik, &score, &p, &mut rng).unwrap();
            let cur = objective(&x);
            assert!(cur <= prev + 1e-12);
            prev = cur;
        }
    }

    #[test]
    fn divergence_is_isolated() {
        // chains that start right of zero see an infinite score
        let s = FnScore::new(1, |x: &[f64], _s: f64, out: &mut [f64]| {
            out[0] = if x[0] > 0.0 { f64::INFINITY } else { -x[0] };
        });
        let cfg = ChainConfig::stationary(0.01, 5, 20, 2, Discretization::Red);
        let batch = run_batch(&cfg, &FlatLikelihood { dim: 1 }, &s).unwrap();
        assert!(!batch.divergences.is_empty());
        for i in 0..20 {
            assert_eq!(batch.samples[(i, 0)].is_nan(), batch.is_diverged(i));
        }
        assert!(batch.finite_samples().nrows() > 0);
    }

    #[test]
    fn trajectory_thinning_and_observer() {
        let (lik, score) = conjugate_1d();
        let mut cfg = ChainConfig::stationary(0.05, 30, 4, 1, Discretization::Red);
        cfg.record_every = Some(10);
        let mut seen = Vec::new();
        let batch = run_batch_observed(&cfg, &lik, &score, 15, |s| {
            seen.push((s.iteration, s.samples().nrows()));
            Ok(())
        })
        .unwrap();
        assert_eq!(batch.trajectory.iter().map(|t| t.iteration).collect::<Vec<_>>(), vec![10, 20, 30]);
        assert_eq!(batch.trajectory[2].samples, batch.samples);
        assert_eq!(seen, vec![(15, 4), (30, 4)]);
    }

    #[test]
    fn csv_and_sidecar_round_trip() {
        let (lik, score) = conjugate_1d();
        let cfg = ChainConfig::stationary(0.05, 10, 5, 9, Discretization::Pnp);
        let batch = run_batch(&cfg, &lik, &score).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("samples.csv");
        batch.write_csv(&csv).unwrap();
        assert_eq!(read_matrix_csv(&csv).unwrap(), batch.samples);
        let side = dir.path().join("samples.json");
        batch.write_sidecar(&side).unwrap();
        let meta: BatchMetadata = serde_json::from_reader(File::open(side).unwrap()).unwrap();
        assert_eq!(meta, batch.metadata());
    }

    #[test]
    fn config_json_round_trip_preserves_digest() {
        let cfg = ChainConfig::stationary(0.4, 600, 1000, 42, Discretization::Pnp)
            .with_schedule(AnnealingSchedule::new(10.0, 0.975, 0.0, 10.0).unwrap())
            .with_init_box(-50.0, 50.0);
        let back: ChainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back.digest(), cfg.digest());
    }
}
