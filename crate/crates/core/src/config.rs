//! Declarative pipeline configuration (TOML).
//!
//! ```toml
//! seed = 7
//!
//! [synth]                  # optional: generate the cohort instead of reading one
//! n_wsis = 8
//! rois_per_wsi = 6
//!
//! [ingest]
//! cohort_dir = "cohort"    # required unless [synth] is present
//! label = "neuritic_plaque"
//!
//! [tile]
//! size = 128               # required: 128 or 256
//! negatives_per_wsi = 0
//! workers = 4
//!
//! [augment]
//! enabled = true
//! margin = 0
//!
//! [normalize]
//! method = "macenko"       # raw | macenko | vahadane
//! # reference_profile = "ref.json"
//! # reference_patches = { NanoZoomer2RS = "wsi_00__roi_000__128" }
//!
//! [split]
//! mode = "nested"          # nested | scanner
//! n_test = 4
//! n_cv = 3
//! # scanner = "NanoZoomerS60"
//!
//! [evaluate]
//! # pred_dir = "predictions"
//! threshold = 0.5
//! granularity = "pooled"   # pooled | per_patch_mean
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::DEFAULT_LABEL;
use crate::metrics::Granularity;
use crate::synth::DEFAULT_STAIN_MATRIX;
use crate::tiling::NormalizationTag;
use crate::wsi::Scanner;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("invalid config at `{path}`: {reason}")]
    Invalid { path: String, reason: String },
}

fn invalid(path: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n_wsis: usize,
    pub rois_per_wsi: usize,
    #[serde(default = "default_stains")]
    pub stain_matrix: [[f64; 3]; 2],
    #[serde(default = "default_level0")]
    pub level0_size: u32,
    #[serde(default = "default_levels")]
    pub levels: usize,
}

fn default_stains() -> [[f64; 3]; 2] {
    DEFAULT_STAIN_MATRIX
}
fn default_level0() -> u32 {
    1024
}
fn default_levels() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSection {
    pub cohort_dir: Option<PathBuf>,
    #[serde(default = "default_label")]
    pub label: String,
}

fn default_label() -> String {
    DEFAULT_LABEL.to_string()
}

impl Default for IngestSection {
    fn default() -> Self {
        IngestSection {
            cohort_dir: None,
            label: default_label(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileSection {
    pub size: Option<u32>,
    #[serde(default)]
    pub negatives_per_wsi: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub margin: u32,
}

fn yes() -> bool {
    true
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection { enabled: true, margin: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizeSection {
    #[serde(default = "default_method")]
    pub method: String,
    pub reference_profile: Option<PathBuf>,
    #[serde(default)]
    pub reference_patches: BTreeMap<String, String>,
}

fn default_method() -> String {
    "macenko".into()
}

impl Default for NormalizeSection {
    fn default() -> Self {
        NormalizeSection {
            method: default_method(),
            reference_profile: None,
            reference_patches: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    pub n_cv: Option<usize>,
    pub scanner: Option<String>,
}

fn default_mode() -> String {
    "nested".into()
}
fn default_n_test() -> usize {
    4
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            mode: default_mode(),
            n_test: default_n_test(),
            n_cv: None,
            scanner: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub pred_dir: Option<PathBuf>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default)]
    pub smooth: f64,
}

fn default_threshold() -> f64 {
    0.5
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            pred_dir: None,
            threshold: default_threshold(),
            granularity: Granularity::Pooled,
            smooth: 0.0,
        }
    }
}

/// The file as written; optional fields are filled in by [`Config::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    #[serde(default)]
    pub seed: u64,
    pub artifact_root: Option<PathBuf>,
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub ingest: IngestSection,
    #[serde(default)]
    pub tile: TileSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub normalize: NormalizeSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Nested,
    Scanner,
}

/// Validated configuration with CLI overrides applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub seed: u64,
    pub artifact_root: Option<PathBuf>,
    pub synth: Option<SynthSection>,
    pub cohort_dir: Option<PathBuf>,
    pub label: String,
    pub patch_size: u32,
    pub negatives_per_wsi: usize,
    pub workers: usize,
    pub augment: AugmentSection,
    pub normalization: NormalizationTag,
    pub reference_profile: Option<PathBuf>,
    pub reference_patches: BTreeMap<Scanner, String>,
    pub split_mode: SplitMode,
    pub n_test: usize,
    pub n_cv: usize,
    pub scanner: Option<Scanner>,
    pub evaluate: EvaluateSection,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub normalization: Option<String>,
    pub reference_profile: Option<PathBuf>,
    pub patch_size: Option<u32>,
    pub artifact_root: Option<PathBuf>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(if path == "." { "<root>" } else { &path }, e.into_inner().message().trim().to_string())
        })
    }
}

impl Config {
    /// Reads and validates a config file; relative paths in it are taken
    /// relative to the file's directory.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Config::resolve(RawConfig::parse(&text)?, overrides, base)
    }

    pub fn resolve(raw: RawConfig, o: &Overrides, base: &Path) -> Result<Self, ConfigError> {
        let rel = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };

        let patch_size = o.patch_size.or(raw.tile.size).ok_or_else(|| invalid("tile.size", "missing patch size (128 or 256)"))?;
        if patch_size != 128 && patch_size != 256 {
            return Err(invalid("tile.size", format!("{patch_size} is not 128 or 256")));
        }
        let workers = o.workers.unwrap_or(raw.tile.workers);
        if workers == 0 {
            return Err(invalid("tile.workers", "must be at least 1"));
        }

        if let Some(s) = &raw.synth {
            if s.n_wsis == 0 {
                return Err(invalid("synth.n_wsis", "must be positive"));
            }
        }
        let cohort_dir = raw.ingest.cohort_dir.map(rel);
        if raw.synth.is_none() && cohort_dir.is_none() {
            return Err(invalid("ingest.cohort_dir", "required when no [synth] section is given"));
        }

        let method = o.normalization.clone().unwrap_or(raw.normalize.method);
        let normalization: NormalizationTag = method.parse().map_err(|e: String| invalid("normalize.method", e))?;
        let mut reference_patches = BTreeMap::new();
        for (k, v) in raw.normalize.reference_patches {
            let scanner: Scanner = k.parse().map_err(|e: String| invalid(&format!("normalize.reference_patches.{k}"), e))?;
            reference_patches.insert(scanner, v);
        }

        let split_mode = match raw.split.mode.as_str() {
            "nested" => SplitMode::Nested,
            "scanner" | "scanner_cv" => SplitMode::Scanner,
            other => return Err(invalid("split.mode", format!("unknown mode {other:?} (nested|scanner)"))),
        };
        let scanner = raw
            .split
            .scanner
            .as_deref()
            .map(|s| s.parse::<Scanner>().map_err(|e| invalid("split.scanner", e)))
            .transpose()?;
        if split_mode == SplitMode::Scanner && scanner.is_none() {
            return Err(invalid("split.scanner", "required in scanner mode"));
        }
        let n_cv = raw.split.n_cv.unwrap_or(match split_mode {
            SplitMode::Nested => 3,
            SplitMode::Scanner => 4,
        });
        if n_cv == 0 || raw.split.n_test == 0 {
            return Err(invalid("split", "group counts must be positive"));
        }

        let evaluate = EvaluateSection {
            pred_dir: raw.evaluate.pred_dir.map(rel),
            ..raw.evaluate
        };
        if !(0.0..=1.0).contains(&evaluate.threshold) {
            return Err(invalid("evaluate.threshold", "must lie in [0, 1]"));
        }

        Ok(Config {
            seed: o.seed.unwrap_or(raw.seed),
            artifact_root: o.artifact_root.clone().or(raw.artifact_root.map(rel)),
            synth: raw.synth,
            cohort_dir,
            label: raw.ingest.label,
            patch_size,
            negatives_per_wsi: raw.tile.negatives_per_wsi,
            workers,
            augment: raw.augment,
            normalization,
            reference_profile: o.reference_profile.clone().or(raw.normalize.reference_profile.map(rel)),
            reference_patches,
            split_mode,
            n_test: raw.split.n_test,
            n_cv,
            scanner,
            evaluate,
        })
    }
}
