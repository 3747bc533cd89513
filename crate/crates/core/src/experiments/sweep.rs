use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{Experiment, ExperimentConfig};
use super::output::{write_traces, TraceRow};
use super::validate2d::trace_run;
use crate::error::{Error, Result};
use crate::samplers::{write_matrix_csv, AnnealingSchedule};

/// Random posteriors per sweep value unless the config says otherwise.
pub const DEFAULT_REALIZATIONS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Gamma,
    SigmaMin,
    EpsMax,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(SweepParam::Gamma),
            "sigma_min" => Ok(SweepParam::SigmaMin),
            "eps_max" => Ok(SweepParam::EpsMax),
            _ => Err(Error::Config(format!("unknown sweep parameter {s:?}; expected gamma, sigma_min or eps_max"))),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Gamma => "gamma",
            SweepParam::SigmaMin => "sigma_min",
            SweepParam::EpsMax => "eps_max",
        })
    }
}

/// Config of one sweep cell. For `sigma_min`, `alpha0` is capped at
/// `1/max(values)²` for every cell so that the prior weight reaches one in
/// all of them and the cells share the same early annealing.
pub fn apply_sweep_value(cfg: &ExperimentConfig, param: SweepParam, value: f64, values: &[f64]) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match param {
        SweepParam::Gamma => c.chain.gamma = value,
        SweepParam::SigmaMin => {
            let s = c
                .chain
                .schedule
                .as_ref()
                .filter(|_| c.chain.annealed)
                .ok_or_else(|| Error::Config("a sigma_min sweep needs an annealed chain with a schedule".into()))?;
            let largest = values.iter().copied().fold(0.0, f64::max);
            let alpha0 = s.alpha0().min(1.0 / (largest * largest));
            c.chain.schedule = Some(AnnealingSchedule::new(s.sigma0(), s.xi(), value, alpha0)?);
        }
        SweepParam::EpsMax => match &mut c.experiment {
            Experiment::Validate2d(s) => s.score.eps_max = value,
            _ => return Err(Error::Config("eps_max sweeps need a validate2d experiment".into())),
        },
    }
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub realization: usize,
    pub min_fi: f64,
    pub min_kl: f64,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub rows: Vec<SweepRow>,
    /// `(value, mean min FI, mean min KL)` in sweep order.
    pub means: Vec<(f64, f64, f64)>,
    pub em_monotone: bool,
    pub divergences: usize,
}

/// Run a validate2d experiment for each of `values` (positive, strictly
/// decreasing) over the same random posteriors and chain seeds. When `out`
/// is given, writes `sweep.csv` there plus one subdirectory per value.
pub fn seed_sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64], out: Option<&Path>) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Config("sweep values must be positive".into()));
    }
    if values.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("sweep values must be strictly decreasing".into()));
    }
    let Experiment::Validate2d(base) = &cfg.experiment else {
        return Err(Error::Config("sweeps need a validate2d experiment".into()));
    };
    cfg.validate()?;
    let cells: Vec<ExperimentConfig> = values
        .iter()
        .map(|&v| apply_sweep_value(cfg, param, v, values))
        .collect::<Result<_>>()?;
    let d = base.realizations.unwrap_or(DEFAULT_REALIZATIONS);

    let mut rows = Vec::new();
    let mut traces: Vec<Vec<TraceRow>> = vec![Vec::new(); cells.len()];
    let mut em_monotone = true;
    let mut divergences = 0;
    for r in 0..d {
        let problem = base.problem(cfg.seed, r, &cfg.diagnostics)?;
        for (c, cell) in cells.iter().enumerate() {
            let Experiment::Validate2d(spec) = &cell.experiment else { unreachable!() };
            let score = spec.score.build(problem.prior.clone())?;
            let run = trace_run(&problem, &cell.chain, &score, &cell.diagnostics, cell.seed)?;
            em_monotone &= run.em_monotone;
            divergences += run.batch.divergences.len();
            let (min_fi, min_kl) = run.minima();
            rows.push(SweepRow {
                value: values[c],
                realization: r,
                min_fi,
                min_kl,
            });
            traces[c].extend(run.trace.iter().map(|t| TraceRow {
                realization: r,
                iteration: t.iteration,
                fi: t.fi,
                kl: t.kl,
            }));
            if let (Some(dir), 0) = (out, r) {
                let cell_dir = dir.join(format!("{param}_{}", values[c]));
                fs::create_dir_all(&cell_dir)?;
                write_matrix_csv(&run.batch.samples, cell_dir.join("samples.csv"))?;
                fs::write(cell_dir.join("config.json"), serde_json::to_string_pretty(cell)?)?;
            }
        }
    }
    let means = values
        .iter()
        .map(|&v| {
            let sel: Vec<&SweepRow> = rows.iter().filter(|row| row.value == v).collect();
            let m = sel.len() as f64;
            (
                v,
                sel.iter().map(|row| row.min_fi).sum::<f64>() / m,
                sel.iter().map(|row| row.min_kl).sum::<f64>() / m,
            )
        })
        .collect();
    let result = SweepResult {
        param,
        values: values.to_vec(),
        rows,
        means,
        em_monotone,
        divergences,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        for (c, t) in traces.iter().enumerate() {
            let cell_dir = dir.join(format!("{param}_{}", values[c]));
            fs::create_dir_all(&cell_dir)?;
            write_traces(t, &cell_dir.join("traces.csv"))?;
        }
        write_sweep_csv(&result, &dir.join("sweep.csv"))?;
    }
    Ok(result)
}

fn write_sweep_csv(r: &SweepResult, path: &Path) -> Result<()> {
    let mut s = String::from("param,value,realization,min_fi,min_kl\n");
    for row in &r.rows {
        s += &format!("{},{:?},{},{:?},{:?}\n", r.param, row.value, row.realization, row.min_fi, row.min_kl);
    }
    for (v, fi, kl) in &r.means {
        s += &format!("{},{v:?},mean,{fi:?},{kl:?}\n", r.param);
    }
    fs::write(path, s)?;
    Ok(())
}
