//! Run configuration for `detect` and `bench`.

use std::path::{Path, PathBuf};

use ovd_core::pipelines::PipelineConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixtures::StubSpec;

/// Where the classifier trunk features come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Use the features stored in the bundle.
    #[default]
    Replay,
    /// Recompute them with the bundle's backbone.
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Background {
    pub logit: f64,
    pub weight: f64,
}

impl Default for Background {
    fn default() -> Self {
        Background {
            logit: 0.0,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Bundle manifest.
    pub fixtures: PathBuf,
    /// Detections file written by `detect`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Embedding bank; built from the bundle's text embeddings when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bank: Option<PathBuf>,
    #[serde(default)]
    pub features: FeatureMode,
    /// Detector backbone run by vanilla and drr. Defaults to the bundle's
    /// architecture with the next seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<StubSpec>,
    #[serde(default)]
    pub background: Background,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn new(fixtures: impl Into<PathBuf>) -> Self {
        RunConfig {
            fixtures: fixtures.into(),
            output: None,
            bank: None,
            features: FeatureMode::default(),
            detector: None,
            background: Background::default(),
            pipeline: PipelineConfig::default(),
        }
    }

    /// Parse a config file; relative paths are taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.fixtures = base.join(&cfg.fixtures);
        cfg.output = cfg.output.map(|p| base.join(p));
        cfg.bank = cfg.bank.map(|p| base.join(p));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate().map_err(Error::config)?;
        if !self.background.logit.is_finite() || !self.background.weight.is_finite() {
            return Err(Error::config("background logit and weight must be finite"));
        }
        if let Some(d) = &self.detector {
            d.arch.validate().map_err(Error::config)?;
        }
        Ok(())
    }
}
