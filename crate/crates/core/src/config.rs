//! Experiment configuration documents (TOML).
//!
//! Relative file references are resolved against the directory holding the
//! config file. Every reference is loaded and validated by
//! [`ExperimentConfig::resolve`] before any simulation starts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost_model::ModelPair;
use crate::drafter::{ConfidenceHistory, DEFAULT_MAX_SL};
use crate::engine::{EngineConfig, Policy, DEFAULT_MAX_BATCH};
use crate::error::{Error, Result};
use crate::estimator::SloConfig;
use crate::oracle::{default_categories, CategoryProcess, OracleConfig};
use crate::workload::{parse_trace, synth_trace, ParseOptions, SynthParams, TraceEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    #[serde(default = "default_max_batch")]
    pub max_batch_size: usize,
    #[serde(default = "default_max_sl")]
    pub max_sl: usize,
    #[serde(default = "default_ema_init")]
    pub ema_init: f64,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    #[serde(default)]
    pub log_ar_rows: bool,
}

fn default_max_batch() -> usize {
    DEFAULT_MAX_BATCH
}
fn default_max_sl() -> usize {
    DEFAULT_MAX_SL
}
fn default_ema_init() -> f64 {
    ConfidenceHistory::default().ema
}
fn default_ema_decay() -> f64 {
    ConfidenceHistory::default().decay
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            max_batch_size: DEFAULT_MAX_BATCH,
            max_sl: DEFAULT_MAX_SL,
            ema_init: default_ema_init(),
            ema_decay: default_ema_decay(),
            log_ar_rows: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoefficientSource {
    File { file: PathBuf },
    Inline(ModelPair),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    #[serde(default)]
    pub miscalibration: f64,
    #[serde(default = "default_categories")]
    pub categories: Vec<CategoryProcess>,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            miscalibration: 0.0,
            categories: default_categories(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    pub file: Option<PathBuf>,
    pub default_category: Option<String>,
    pub rate_scale: Option<f64>,
    pub synth: Option<SynthParams>,
    /// Seed for synthetic traces; defaults to the experiment seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub policy: Policy,
    pub label: Option<String>,
    #[serde(default)]
    pub slo: SloConfig,
    #[serde(default)]
    pub engine: EngineSection,
    pub coefficients: CoefficientSource,
    #[serde(default)]
    pub oracle: OracleSection,
    pub trace: TraceSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// A fully loaded experiment ready to run.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub label: String,
    pub policy: Policy,
    pub engine: EngineConfig,
    pub trace: Vec<TraceEvent>,
}

/// Read a `{draft, target}` coefficient document.
pub fn read_coefficients(path: &Path) -> Result<ModelPair> {
    let bytes = fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let pair: ModelPair = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    pair.validate()?;
    Ok(pair)
}

pub fn write_coefficients(path: &Path, pair: &ModelPair) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(pair)?;
    json.push(b'\n');
    fs::write(path, json)?;
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(doc: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&doc, &base)
    }

    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn default_label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.policy.to_string().replace(':', "_"))
    }

    pub fn model_pair(&self) -> Result<ModelPair> {
        match &self.coefficients {
            CoefficientSource::File { file } => read_coefficients(&self.path(file)),
            CoefficientSource::Inline(pair) => {
                pair.validate()?;
                Ok(*pair)
            }
        }
    }

    pub fn load_trace(&self) -> Result<Vec<TraceEvent>> {
        let t = &self.trace;
        match (&t.file, &t.synth) {
            (Some(file), None) => {
                let path = self.path(file);
                let f = fs::File::open(&path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                let opts = ParseOptions {
                    default_category: t.default_category.clone(),
                    rate_scale: t.rate_scale,
                };
                parse_trace(f, &opts)
            }
            (None, Some(params)) => {
                let mut events = synth_trace(params, t.seed.unwrap_or(self.seed))?;
                if let Some(scale) = t.rate_scale {
                    if !(scale.is_finite() && scale > 0.0) {
                        return Err(Error::Config(format!(
                            "rate scale must be > 0, got {scale}"
                        )));
                    }
                    events.iter_mut().for_each(|e| e.arrival_ms /= scale);
                }
                Ok(events)
            }
            _ => Err(Error::Config(
                "trace needs exactly one of `file` or `synth`".into(),
            )),
        }
    }

    pub fn engine_config(&self) -> Result<EngineConfig> {
        let history = ConfidenceHistory::new(self.engine.ema_init, self.engine.ema_decay)
            .map_err(|e| Error::Config(e.to_string()))?;
        let engine = EngineConfig {
            pair: self.model_pair()?,
            slo: self.slo,
            max_batch_size: self.engine.max_batch_size,
            max_sl: self.engine.max_sl,
            history,
            oracle: OracleConfig {
                categories: self.oracle.categories.clone(),
                miscalibration: self.oracle.miscalibration,
                seed: self.seed,
            },
            log_ar_rows: self.engine.log_ar_rows,
        };
        engine.validate().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })?;
        Ok(engine)
    }

    /// Load every reference and check that the pieces fit together.
    pub fn resolve(&self) -> Result<ResolvedExperiment> {
        self.policy.validate()?;
        let engine = self.engine_config()?;
        let trace = self.load_trace()?;
        if trace.is_empty() {
            return Err(Error::Config("trace has no requests".into()));
        }
        for ev in &trace {
            engine
                .oracle
                .category_id(&ev.category)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(ResolvedExperiment {
            label: self.default_label(),
            policy: self.policy,
            engine,
            trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"
        seed = 3
        policy = "fixed:3"

        [slo]
        ttft_limit_ms = 200.0
        tpot_limit_ms = 30.0
        scale = 1.2

        [coefficients.draft]
        alpha = 0.0
        gamma = 0.01
        delta = 0.8

        [coefficients.target]
        alpha = 0.0004
        gamma = 0.15
        delta = 6.0

        [trace.synth]
        pattern = "steady_low"
        duration_ms = 5000.0
        rate_per_ms = 0.002
    "#;

    #[test]
    fn inline_config_resolves() {
        let cfg = ExperimentConfig::from_toml_str(DOC, Path::new(".")).unwrap();
        assert_eq!(cfg.policy, Policy::FixedSl(3));
        assert_eq!(cfg.default_label(), "fixed_3");
        let r = cfg.resolve().unwrap();
        assert_eq!(r.engine.slo.scale, 1.2);
        assert_eq!(r.engine.oracle.seed, 3);
        assert_eq!(r.engine.max_batch_size, 256);
        assert!(!r.trace.is_empty());
    }

    #[test]
    fn unknown_keys_and_missing_files_fail_fast() {
        let doc = DOC.replace("seed = 3", "seed = 3\nturbo = true");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&doc, Path::new(".")),
            Err(Error::Config(_))
        ));

        let doc = DOC.replace(
            "[trace.synth]",
            "[trace]\nfile = \"missing.csv\"\n[trace.synth]",
        );
        let cfg = ExperimentConfig::from_toml_str(&doc, Path::new(".")).unwrap();
        assert!(matches!(cfg.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn coefficient_document_round_trip() {
        let cfg = ExperimentConfig::from_toml_str(DOC, Path::new(".")).unwrap();
        let pair = cfg.model_pair().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        write_coefficients(&path, &pair).unwrap();
        assert_eq!(read_coefficients(&path).unwrap(), pair);
    }
}
