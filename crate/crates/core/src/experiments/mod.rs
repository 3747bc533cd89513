//! Configuration-driven experiments.
//!
//! An [`ExperimentConfig`] is a single JSON document naming the experiment
//! kind, its posterior, the chain configuration and the diagnostics. Running
//! it writes `samples.csv`, `stats.json`, `meta.json` and, depending on the
//! kind, `traces.csv` or `chi2.csv` into the output directory.

pub mod bhi;
pub mod image;
pub mod validate2d;

mod config;
mod output;
mod sweep;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::diagnostics::Grid2D;
use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::priors::ScoreModel;

pub use bhi::BhiSpec;
pub use config::{load_config, parse_config, Experiment, ExperimentConfig, PriorSource};
pub use image::{mode_report, shape_prior, CsSpec, GaussianImageSpec, ModeReport, MriSpec};
pub use output::{execute, run_experiment, CsvTable, RunOutput, RunSummary, StatRecord, TraceRow, SCHEMA_VERSION};
pub use sweep::{apply_sweep_value, seed_sweep, SweepParam, SweepResult, SweepRow, DEFAULT_REALIZATIONS};
pub use validate2d::{trace_run, TracePoint, TraceRun, Validate2dProblem, Validate2dSpec, MIN_GRID_MASS};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "PMC_OUTPUT_ROOT";

/// Stream-id offsets keeping problem generation, EM restarts and chains apart.
pub(crate) const PROBLEM_STREAM: u64 = 1 << 40;
pub(crate) const EM_STREAM: u64 = 2 << 40;

/// Chain seed for realization `r`; realization 0 keeps the configured seed.
pub fn derive_seed(seed: u64, r: usize) -> u64 {
    if r == 0 {
        return seed;
    }
    // splitmix64 finalizer
    let mut z = seed ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Which score the sampler sees. `eps_max = 0` with no explicit noise gives
/// the exact score.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSpec {
    #[serde(default)]
    pub eps_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
}

impl ScoreSpec {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn noisy(eps_max: f64) -> Self {
        Self {
            eps_max,
            ..Self::default()
        }
    }

    pub(crate) fn noisy_default() -> Self {
        Self::noisy(2.5)
    }

    pub fn build(&self, prior: GaussianMixture) -> Result<ScoreModel> {
        let mut s = if self.eps_max == 0.0 && self.noise_std.is_none() {
            ScoreModel::exact(prior)
        } else {
            ScoreModel::noisy(prior, self.eps_max)?
        };
        if let Some(std) = self.noise_std {
            s = s.with_noise_std(std)?;
        }
        if let Some(r) = self.clip {
            s = s.with_clip(r)?;
        }
        Ok(s)
    }
}

fn default_eval_every() -> usize {
    50
}
fn default_restarts() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSpec {
    #[serde(default)]
    pub grid: Grid2D,
    /// Fit and score the chains every this many iterations.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Mixture components for the fit; defaults to the prior's count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
    #[serde(default = "default_restarts")]
    pub em_restarts: usize,
}

impl Default for DiagnosticsSpec {
    fn default() -> Self {
        Self {
            grid: Grid2D::default(),
            eval_every: default_eval_every(),
            components: None,
            em_restarts: default_restarts(),
        }
    }
}

impl DiagnosticsSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be at least 1"));
        }
        if self.em_restarts == 0 {
            return Err(Error::invalid("em_restarts must be at least 1"));
        }
        if self.components == Some(0) {
            return Err(Error::invalid("components must be at least 1"));
        }
        Ok(())
    }
}

/// Resolve the directory an experiment writes into.
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    let base = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("pmc_out").join(cfg.experiment.kind()));
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if base.is_relative() => PathBuf::from(root).join(base),
        _ => base,
    }
}
