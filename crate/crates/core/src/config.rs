//! Run configuration: one TOML file per experiment plus dotted overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentPolicy;
use crate::ctc::BeamConfig;
use crate::datagen::{DomainPair, Setting, SettingSizes, DEFAULT_TOKENS};
use crate::encoder::EncoderConfig;
use crate::lm::Smoothing;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected section.key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenSection {
    pub setting: Setting,
    pub base_seed: u64,
    pub sizes: SettingSizes,
    pub domains: DomainPair,
}

impl Default for DatagenSection {
    fn default() -> Self {
        Self {
            setting: Setting::InDomainSmall,
            base_seed: 0,
            sizes: SettingSizes::default(),
            domains: DomainPair::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    /// N-gram order; 0 decodes and pseudo-labels without an LM.
    pub order: usize,
    pub smoothing: Smoothing,
    /// Training text; defaults to the generated LM corpus.
    pub corpus: Option<PathBuf>,
}

impl Default for LmSection {
    fn default() -> Self {
        Self { order: 3, smoothing: Smoothing::WittenBell, corpus: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub workdir: PathBuf,
    /// Per-epoch checkpoints, relative to the workdir unless absolute.
    pub checkpoint_dir: PathBuf,
    pub keep_epoch_checkpoints: bool,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { workdir: PathBuf::from("work"), checkpoint_dir: PathBuf::from("checkpoints"), keep_epoch_checkpoints: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MplInit {
    Seed,
    Ipl,
}

/// Stages of the end-to-end run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub mpl_init: MplInit,
    pub topline: bool,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self { mpl_init: MplInit::Ipl, topline: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub datagen: DatagenSection,
    pub encoder: EncoderConfig,
    pub augment: AugmentPolicy,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    pub lm: LmSection,
    pub paths: PathsSection,
    pub pipeline: PipelineSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            datagen: DatagenSection::default(),
            encoder: EncoderConfig::default(),
            // Utterances are about 25 frames long, so masks are kept narrow.
            augment: AugmentPolicy { max_time_mask_width: 5, max_freq_mask_width: 2, ..AugmentPolicy::default() },
            train: TrainConfig::default(),
            beam: BeamConfig::default(),
            lm: LmSection::default(),
            paths: PathsSection::default(),
            pipeline: PipelineSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    /// Applies `section.key=value` overrides in order. Values are parsed as
    /// TOML (numbers, booleans, inline tables) and fall back to bare strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Table::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.to_string()))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
                return Err(ConfigError::Override(o.to_string()));
            }
            let value = parse_value(raw.trim());
            let mut table = &mut root;
            for part in &path[..path.len() - 1] {
                let slot = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = slot.as_table_mut().ok_or_else(|| ConfigError::Override(o.to_string()))?;
            }
            table.insert(path[path.len() - 1].to_string(), value);
        }
        toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    /// Uses `seed` for both data generation and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.datagen.base_seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn with_workdir(mut self, workdir: impl Into<PathBuf>) -> Self {
        self.paths.workdir = workdir.into();
        self
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths.workdir.join(&self.paths.checkpoint_dir)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.encoder.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.beam.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let sizes = &self.datagen.sizes;
        if sizes.labeled == 0 || sizes.dev == 0 || sizes.test == 0 || sizes.unlabeled == Some(0) {
            return invalid("datagen.sizes must be positive".into());
        }
        for (name, d) in [("source", &self.datagen.domains.source), ("shifted", &self.datagen.domains.shifted)] {
            if d.feature_dim != self.encoder.feature_dim {
                return invalid(format!(
                    "encoder.feature_dim is {} but the {name} domain emits {} dims",
                    self.encoder.feature_dim, d.feature_dim
                ));
            }
        }
        if self.encoder.vocab_size_with_blank != DEFAULT_TOKENS.len() + 1 {
            return invalid(format!("encoder.vocab_size_with_blank must be {}", DEFAULT_TOKENS.len() + 1));
        }
        if let Smoothing::AddK { k } = self.lm.smoothing {
            if !(k >= 0.0) || !k.is_finite() {
                return invalid("lm.smoothing.k must be finite and non-negative".into());
            }
        }
        if let Some(corpus) = &self.lm.corpus {
            if !corpus.is_file() {
                return invalid(format!("lm.corpus {} does not exist", corpus.display()));
            }
        }
        if self.paths.workdir.as_os_str().is_empty() {
            return invalid("paths.workdir is empty".into());
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::NormKind;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::from_toml(&back.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "encoder.norm_kind={kind=\"batch\"}",
                "train.w=0.9",
                "datagen.setting=out_domain",
                "datagen.sizes.unlabeled=17",
                "lm.order = 1",
            ])
            .unwrap();
        assert_eq!(cfg.encoder.norm_kind, NormKind::Batch);
        assert_eq!(cfg.train.w, 0.9);
        assert_eq!(cfg.datagen.setting, Setting::OutDomain);
        assert_eq!(cfg.datagen.sizes.unlabeled, Some(17));
        assert_eq!(cfg.lm.order, 1);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn bad_overrides() {
        let cfg = RunConfig::default();
        assert!(matches!(cfg.with_overrides(&["train"]), Err(ConfigError::Override(_))));
        assert!(matches!(cfg.with_overrides(&["w=1"]), Err(ConfigError::Override(_))));
        assert!(cfg.with_overrides(&["train.nonsense=1"]).is_err());
        assert!(cfg.with_overrides(&["train.w=\"high\""]).is_err());
    }

    #[test]
    fn validation_catches_mismatches() {
        let mut cfg = RunConfig::default();
        cfg.encoder.feature_dim = 6;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.lm.corpus = Some(PathBuf::from("/definitely/not/here.txt"));
        assert!(cfg.validate().unwrap_err().to_string().contains("/definitely/not/here.txt"));
        let mut cfg = RunConfig::default();
        cfg.train.w = 0.0;
        assert!(cfg.validate().is_err());
    }
}
