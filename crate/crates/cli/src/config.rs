//! Run configuration: one JSON file, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result, bail};
use ccmine::ccgen::{BACKGROUND, BetaScope, DEFAULT_BETA, DEFAULT_GAMMA};
use ccmine::filters::DEFAULT_DELTA;
use ccmine::llm::ClientConfig;
use ccmine::metrics::Aggregation;
use ccmine::segment::Upsample;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub cooc: Option<PathBuf>,
    pub counts: Option<PathBuf>,
    pub visibility: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub cc_dictionary: Option<PathBuf>,
    pub features_dir: Option<PathBuf>,
    pub gt_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CcMode {
    /// No contrastive concepts.
    None,
    /// `{"background"}` only.
    Bg,
    /// Co-occurrence dictionary plus "background".
    #[default]
    Dict,
    /// Completion-service lists plus "background".
    Llm,
    /// Every other dataset class.
    Privileged,
}

impl CcMode {
    pub fn name(self) -> &'static str {
        match self {
            CcMode::None => "none",
            CcMode::Bg => "bg",
            CcMode::Dict => "dict",
            CcMode::Llm => "llm",
            CcMode::Privileged => "privileged",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    IouSingle,
    Miou,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub gamma: f64,
    pub delta: f64,
    pub beta: f64,
    pub beta_scope: BetaScope,
    pub sigmoid_threshold: Option<f64>,
    pub max_candidates: Option<usize>,
    pub stopwords: Option<Vec<String>>,
    pub fold_plurals: bool,
    pub shard_lines: usize,
    pub llm: ClientConfig,
    /// Wrap prompts in instruction markers.
    pub prompt_markers: bool,
    pub cc_mode: CcMode,
    pub metric: Metric,
    pub aggregation: Aggregation,
    pub upsample: Upsample,
    pub background_label: String,
    pub workers: Option<usize>,
    pub built_at: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            gamma: DEFAULT_GAMMA,
            delta: DEFAULT_DELTA,
            beta: DEFAULT_BETA,
            beta_scope: BetaScope::default(),
            sigmoid_threshold: None,
            max_candidates: None,
            stopwords: None,
            fold_plurals: false,
            shard_lines: 65_536,
            llm: ClientConfig::default(),
            prompt_markers: true,
            cc_mode: CcMode::default(),
            metric: Metric::default(),
            aggregation: Aggregation::default(),
            upsample: Upsample::default(),
            background_label: BACKGROUND.into(),
            workers: None,
            built_at: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            bail!("gamma must lie in [0, 1), got {}", self.gamma);
        }
        if !(-1.0..=1.0).contains(&self.delta) {
            bail!("delta must lie in [-1, 1], got {}", self.delta);
        }
        if !(-1.0..=1.0).contains(&self.beta) {
            bail!("beta must lie in [-1, 1], got {}", self.beta);
        }
        if let Some(t) = self.sigmoid_threshold {
            if !(t > 0.0 && t < 1.0) {
                bail!("sigmoid threshold must lie in (0, 1), got {t}");
            }
        }
        if self.shard_lines == 0 {
            bail!("shard_lines must be positive");
        }
        if self.workers == Some(0) {
            bail!("workers must be at least 1");
        }
        Ok(())
    }

    pub fn workers(&self) -> usize {
        self.workers.unwrap_or(1)
    }
}

/// A required path: the flag, else the config entry.
pub fn need(flag: &Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    match flag.as_ref().or(config.as_ref()) {
        Some(p) => Ok(p.clone()),
        None => bail!("missing --{name} (or paths.{} in the config)", name.replace('-', "_")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!((c.gamma, c.delta, c.beta), (0.01, 0.8, 0.9));
        let text = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.cc_mode, CcMode::Dict);
        let partial: RunConfig = serde_json::from_str(r#"{"gamma": 0.02, "cc_mode": "llm"}"#).unwrap();
        assert_eq!(partial.gamma, 0.02);
        assert_eq!(partial.delta, 0.8);
        assert!(serde_json::from_str::<RunConfig>(r#"{"gama": 0.02}"#).is_err());
    }

    #[test]
    fn ranges_checked() {
        let bad = |f: fn(&mut RunConfig)| {
            let mut c = RunConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.gamma = 1.0));
        assert!(bad(|c| c.delta = 1.5));
        assert!(bad(|c| c.sigmoid_threshold = Some(1.0)));
        assert!(bad(|c| c.workers = Some(0)));
        assert!(RunConfig::default().validate().is_ok());
    }
}
