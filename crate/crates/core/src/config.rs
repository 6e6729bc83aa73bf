//! Run configuration, canonical hashing and seed derivation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attribution::AttributionConfig;
use crate::classifier::ClassifierConfig;
use crate::faithfulness::FaithfulnessConfig;
use crate::ingest::{AugmentConfig, PreprocessConfig};
use crate::segmentation::SegmentationConfig;
use crate::selection::SelectionConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// SHA-256 over the canonical JSON form of `value`, hex encoded.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// Stable 64-bit seed from a parent seed, a label and an index.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
    /// Root for run directories. `GEOXPLAIN_CACHE` takes precedence.
    pub output_dir: PathBuf,
    /// Process only the first N eval images; 0 means all.
    pub limit: usize,
    /// Also write each crop as `{image_id}_{rank}.png`.
    pub export_crop_pngs: bool,
    /// Largest parameter grid `sweep` accepts.
    pub max_grid_points: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            manifest: PathBuf::from("data/manifest.jsonl"),
            output_dir: PathBuf::from("runs"),
            limit: 0,
            export_crop_pngs: false,
            max_grid_points: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub ingest: IngestSection,
    pub classifier: ClassifierConfig,
    pub attribution: AttributionConfig,
    pub segmentation: SegmentationConfig,
    pub selection: SelectionConfig,
    pub faithfulness: FaithfulnessConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    // negated comparisons so that NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let pre = &self.ingest.preprocess;
        if pre.side == 0 || !pre.side.is_multiple_of(2) {
            return invalid(format!(
                "ingest.preprocess.side must be a positive even number, got {}",
                pre.side
            ));
        }
        if pre.std.iter().any(|&s| !(s > 0.0)) {
            return invalid("ingest.preprocess.std entries must be positive".into());
        }
        let p = self.attribution.percentile_p;
        if !(p > 0.0 && p <= 100.0) {
            return invalid(format!("attribution.percentile_p must lie in (0, 100], got {p}"));
        }
        if self.attribution.methods.is_empty() {
            return invalid("attribution.methods is empty".into());
        }
        if self.segmentation.backends.is_empty() {
            return invalid("segmentation.backends is empty".into());
        }
        if self.segmentation.fallback.levels == 0 {
            return invalid("segmentation.fallback.levels must be at least 1".into());
        }
        self.selection
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.classifier
            .train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Identity of a run. The output location is excluded so the same
    /// experiment hashes the same wherever it is written.
    pub fn hash(&self) -> String {
        let mut keyed = self.clone();
        keyed.run.output_dir = PathBuf::new();
        keyed.run.max_grid_points = 0;
        config_hash(&keyed)
    }
}

/// The shipped default config, with every default written out.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../../config/default.toml");
