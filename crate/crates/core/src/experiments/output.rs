use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{Experiment, ExperimentConfig};
use super::{bhi, image, output_dir, validate2d};
use crate::diagnostics::Grid2D;
use crate::error::Result;
use crate::samplers::{write_matrix_csv, Divergence};

/// Version tag of the CSV/JSON layouts recorded in `meta.json`.
pub const SCHEMA_VERSION: u32 = 1;

/// Non-finite values are written as the strings `"NaN"`, `"inf"`, `"-inf"`.
pub(crate) fn json_number(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("NaN")
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

mod number {
    use serde::{Deserialize, Deserializer, Serializer};
    use serde_json::Value;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&super::json_number(*v), s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Value::deserialize(d)? {
            Value::Number(n) => n.as_f64().ok_or_else(|| serde::de::Error::custom("bad number")),
            Value::String(s) => match s.as_str() {
                "NaN" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => Err(serde::de::Error::custom(format!("bad number {s}"))),
            },
            _ => Err(serde::de::Error::custom("expected a number")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatRecord {
    pub metric: String,
    #[serde(with = "number")]
    pub value: f64,
    pub config_digest: String,
    pub grid: Option<Grid2D>,
    pub warnings: Vec<String>,
}

impl StatRecord {
    pub fn new(metric: impl Into<String>, value: f64) -> Self {
        Self {
            metric: metric.into(),
            value,
            config_digest: String::new(),
            grid: None,
            warnings: Vec::new(),
        }
    }

    pub fn with_grid(mut self, grid: Grid2D) -> Self {
        self.grid = Some(grid);
        self
    }

    pub fn with_warnings(mut self, w: Vec<String>) -> Self {
        self.warnings = w;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub realization: usize,
    pub iteration: usize,
    pub fi: f64,
    pub kl: f64,
}

/// An extra CSV artifact.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Everything an experiment produced, before it is written out.
#[derive(Clone, Debug)]
pub struct RunOutput {
    /// `batch × n`, NaN rows for diverged chains.
    pub samples: DMatrix<f64>,
    pub records: Vec<StatRecord>,
    pub traces: Vec<TraceRow>,
    pub tables: Vec<CsvTable>,
    pub divergences: Vec<Divergence>,
    pub warnings: Vec<String>,
    /// Whether every EM fit of the run increased its log-likelihood
    /// monotonically (`None` when no fit was made).
    pub em_monotone: Option<bool>,
}

impl RunOutput {
    pub(crate) fn new(samples: DMatrix<f64>) -> Self {
        Self {
            samples,
            records: Vec::new(),
            traces: Vec::new(),
            tables: Vec::new(),
            divergences: Vec::new(),
            warnings: Vec::new(),
            em_monotone: None,
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.records.iter().find(|r| r.metric == name).map(|r| r.value)
    }

    pub(crate) fn push(&mut self, metric: impl Into<String>, value: f64) {
        self.records.push(StatRecord::new(metric, value));
    }
}

/// Run the experiment without touching the filesystem.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut out = match &cfg.experiment {
        Experiment::Validate2d(s) => validate2d::run(cfg, s)?,
        Experiment::GaussianImage(s) => image::run_gaussian_image(cfg, s)?,
        Experiment::Cs(s) => image::run_cs(cfg, s)?,
        Experiment::MriFourier(s) => image::run_mri(cfg, s)?,
        Experiment::Bhi(s) => bhi::run(cfg, s)?,
    };
    let digest = cfg.digest();
    for r in &mut out.records {
        r.config_digest = digest.clone();
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub output: RunOutput,
    pub wall_clock_secs: f64,
}

/// Run the experiment and write its artifacts into [`output_dir`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let start = Instant::now();
    let output = execute(cfg)?;
    let wall = start.elapsed().as_secs_f64();
    let dir = output_dir(cfg);
    write_artifacts(cfg, &output, &dir, wall)?;
    Ok(RunSummary {
        dir,
        output,
        wall_clock_secs: wall,
    })
}

pub(crate) fn write_artifacts(cfg: &ExperimentConfig, out: &RunOutput, dir: &Path, wall: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_matrix_csv(&out.samples, dir.join("samples.csv"))?;
    fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&out.records)?)?;
    let mut schemas = serde_json::Map::new();
    schemas.insert("samples.csv".into(), json!("x0..x{n-1}; one row per chain; NaN row for a diverged chain"));
    schemas.insert("stats.json".into(), json!("array of {metric, value, config_digest, grid, warnings}"));
    if matches!(cfg.experiment, Experiment::Validate2d(_)) {
        write_traces(&out.traces, &dir.join("traces.csv"))?;
        schemas.insert("traces.csv".into(), json!("realization,iteration,fi,kl"));
    }
    for t in &out.tables {
        write_table(t, &dir.join(&t.name))?;
        schemas.insert(t.name.clone(), json!(t.header.join(",")));
    }
    let meta = json!({
        "config": cfg,
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "chain_seed": cfg.chain.seed,
        "versions": { "pnp_mc": env!("CARGO_PKG_VERSION"), "schema": SCHEMA_VERSION },
        "schemas": schemas,
        "divergences": out.divergences,
        "warnings": out.warnings,
        "em_monotone": out.em_monotone,
        "wall_clock_secs": wall,
    });
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:?}")
    }
}

pub(crate) fn write_traces(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "realization,iteration,fi,kl")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.realization, r.iteration, fmt(r.fi), fmt(r.kl))?;
    }
    w.flush()?;
    Ok(())
}

fn write_table(t: &CsvTable, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", t.header.join(","))?;
    for row in &t.rows {
        let cells: Vec<String> = row.iter().map(|v| fmt(*v)).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}
