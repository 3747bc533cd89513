use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BhiSpec, CsSpec, DiagnosticsSpec, GaussianImageSpec, MriSpec, Validate2dSpec};
use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::samplers::ChainConfig;
use crate::sha256_hex;

/// A prior given inline or as a path to a mixture document. Paths are
/// resolved (relative to the config file) when the config is loaded.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorSource {
    File(PathBuf),
    Inline(GaussianMixture),
}

impl PriorSource {
    pub fn mixture(&self) -> Result<&GaussianMixture> {
        match self {
            PriorSource::Inline(g) => Ok(g),
            PriorSource::File(p) => Err(Error::Config(format!("prior file {} was not resolved", p.display()))),
        }
    }

    fn resolve(&mut self, base: &Path) -> Result<()> {
        if let PriorSource::File(p) = self {
            let path = if p.is_relative() { base.join(&*p) } else { p.clone() };
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::Config(format!("cannot read prior file {}: {e}", path.display())))?;
            let g: GaussianMixture = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("prior file {}: {e}", path.display())))?;
            *self = PriorSource::Inline(g);
        }
        Ok(())
    }
}

impl From<GaussianMixture> for PriorSource {
    fn from(g: GaussianMixture) -> Self {
        PriorSource::Inline(g)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Experiment {
    Validate2d(Validate2dSpec),
    GaussianImage(GaussianImageSpec),
    Cs(CsSpec),
    MriFourier(MriSpec),
    Bhi(BhiSpec),
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Validate2d(_) => "validate2d",
            Experiment::GaussianImage(_) => "gaussian_image",
            Experiment::Cs(_) => "cs",
            Experiment::MriFourier(_) => "mri_fourier",
            Experiment::Bhi(_) => "bhi",
        }
    }

    fn prior_mut(&mut self) -> Option<&mut PriorSource> {
        match self {
            Experiment::Validate2d(s) => Some(&mut s.prior),
            Experiment::Cs(s) => s.prior.as_mut(),
            Experiment::MriFourier(s) => s.prior.as_mut(),
            Experiment::Bhi(s) => s.prior.as_mut(),
            Experiment::GaussianImage(_) => None,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Experiment::Validate2d(s) => s.validate(),
            Experiment::GaussianImage(s) => s.validate(),
            Experiment::Cs(s) => s.validate(),
            Experiment::MriFourier(s) => s.validate(),
            Experiment::Bhi(s) => s.validate(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for problem generation and diagnostics.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub experiment: Experiment,
    pub chain: ChainConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
}

impl ExperimentConfig {
    /// Check everything that deserialization does not.
    pub fn validate(&self) -> Result<()> {
        self.validate_located().map_err(|(_, e)| e)
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    fn validate_located(&self) -> std::result::Result<(), (Vec<&'static str>, Error)> {
        self.chain.validate().map_err(|e| (vec!["chain", chain_field(&e)], e))?;
        self.diagnostics.validate().map_err(|e| (vec!["diagnostics"], e))?;
        if let Experiment::Validate2d(_) = self.experiment {
            if self.chain.batch < 2 {
                return Err((vec!["chain", "batch"], Error::invalid("validate2d needs at least 2 chains")));
            }
        }
        self.experiment.validate().map_err(|e| (vec!["experiment"], e))
    }
}

// Validation messages lead with the offending field name.
fn chain_field(e: &Error) -> &'static str {
    const FIELDS: [&str; 8] = [
        "gamma",
        "n_iters",
        "batch",
        "schedule",
        "alpha_static",
        "sigma_static",
        "init_box",
        "record_every",
    ];
    let msg = e.to_string();
    FIELDS.iter().find(|f| msg.contains(*f)).copied().unwrap_or("chain")
}

/// 1-based line of the key path `keys` in `text`, searching each key after
/// the previous one.
fn locate(text: &str, keys: &[&str]) -> Option<usize> {
    let mut pos = 0;
    for k in keys {
        pos += text[pos..].find(&format!("\"{k}\""))?;
    }
    Some(text[..pos].matches('\n').count() + 1)
}

/// Parse and validate a config document. Errors carry the line they refer
/// to. Relative prior paths resolve against `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        // errors inside the tagged experiment block are reported at its end;
        // point at the named field when there is one
        let line = msg
            .split('`')
            .nth(1)
            .and_then(|field| locate(text, &[field]))
            .unwrap_or(e.line());
        let msg = msg.split(" at line ").next().unwrap_or(&msg).to_string();
        Error::Config(format!("line {line}: {msg}"))
    })?;
    if let Some(p) = cfg.experiment.prior_mut() {
        p.resolve(base_dir).map_err(|e| {
            let line = locate(text, &["experiment", "prior"]).unwrap_or(1);
            let msg = match e {
                Error::Config(m) => m,
                other => other.to_string(),
            };
            Error::Config(format!("line {line}: {msg}"))
        })?;
    }
    cfg.validate_located().map_err(|(path, e)| {
        let line = (1..=path.len())
            .rev()
            .find_map(|n| locate(text, &path[..n]))
            .unwrap_or(1);
        Error::Config(format!("line {line} ({}): {e}", path.join(".")))
    })?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
  "seed": 3,
  "experiment": { "kind": "validate2d" },
  "chain": {
    "gamma": 0.4,
    "n_iters": 10,
    "batch": 20,
    "seed": 1,
    "discretization": "pnp",
    "init_box": [-1.0, 1.0]
  }
}"#;

    #[test]
    fn minimal_validate2d_parses() {
        let cfg = parse_config(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(cfg.experiment.kind(), "validate2d");
        assert_eq!(cfg.diagnostics.eval_every, 50);
    }

    #[test]
    fn unknown_field_reports_its_line() {
        let text = MINIMAL.replace("\"batch\": 20,", "\"batch\": 20,\n    \"bogus\": 1,");
        let msg = parse_config(&text, Path::new(".")).unwrap_err().to_string();
        assert!(msg.contains("line 8"), "{msg}");
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn invalid_value_reports_field_line() {
        let text = MINIMAL.replace("\"gamma\": 0.4", "\"gamma\": -0.4");
        let msg = parse_config(&text, Path::new(".")).unwrap_err().to_string();
        assert!(msg.contains("line 5 (chain.gamma)"), "{msg}");
    }

    #[test]
    fn syntax_error_reports_line() {
        let text = MINIMAL.replace("\"seed\": 1,", "\"seed\": 1,,");
        let msg = parse_config(&text, Path::new(".")).unwrap_err().to_string();
        assert!(msg.starts_with("config error: line 8") || msg.contains("line 8"), "{msg}");
    }

    #[test]
    fn unknown_experiment_field_is_located() {
        let text = MINIMAL.replace("\"kind\": \"validate2d\"", "\"kind\": \"validate2d\",\n    \"a_stdd\": 1.0");
        let msg = parse_config(&text, Path::new(".")).unwrap_err().to_string();
        assert!(msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn missing_prior_file_is_an_error() {
        let text = MINIMAL.replace("\"kind\": \"validate2d\"", "\"kind\": \"validate2d\", \"prior\": \"nope.json\"");
        let msg = parse_config(&text, Path::new("/nonexistent")).unwrap_err().to_string();
        assert!(msg.contains("line 3") && msg.contains("nope.json"), "{msg}");
    }

    #[test]
    fn prior_file_is_resolved_inline() {
        let dir = tempfile::tempdir().unwrap();
        let prior = GaussianMixture::gaussian(vec![0.0, 1.0], crate::Covariance::Isotropic(2.0)).unwrap();
        std::fs::write(dir.path().join("p.json"), serde_json::to_string(&prior).unwrap()).unwrap();
        let text = MINIMAL.replace("\"kind\": \"validate2d\"", "\"kind\": \"validate2d\", \"prior\": \"p.json\"");
        let cfg = parse_config(&text, dir.path()).unwrap();
        let Experiment::Validate2d(s) = &cfg.experiment else { panic!() };
        assert_eq!(s.prior.mixture().unwrap().means()[0], vec![0.0, 1.0]);
    }

    #[test]
    fn digest_ignores_output_dir_and_round_trips() {
        let mut cfg = parse_config(MINIMAL, Path::new(".")).unwrap();
        let d = cfg.digest();
        cfg.output_dir = Some("elsewhere".into());
        assert_eq!(cfg.digest(), d);
        let echoed = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(parse_config(&echoed, Path::new(".")).unwrap().digest(), d);
    }
}
