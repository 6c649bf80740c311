//! JSON-lines patch manifest.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AugmentationTag, NormalizationTag, PatchSample, PatchSize};
use crate::wsi::Scanner;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub patch_id: String,
    pub wsi_id: String,
    pub scanner: Scanner,
    pub origin_x: i64,
    pub origin_y: i64,
    pub level: usize,
    pub size: PatchSize,
    pub context_ratio: f64,
    pub augmentation_tag: AugmentationTag,
    pub normalization_tag: NormalizationTag,
    pub image_path: String,
    pub mask_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_roi: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub source_rois: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<String>,
}

impl ManifestRecord {
    /// Writes the sample's image and mask PNGs under `dir` and returns
    /// the matching manifest line.
    pub fn persist(sample: &PatchSample, scanner: Scanner, dir: &Path) -> Result<Self, ManifestError> {
        let patch_id = sample.patch_id();
        let image_path = format!("images/{patch_id}.png");
        let mask_path = format!("masks/{patch_id}.png");
        for sub in ["images", "masks"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|source| ManifestError::Io { path: d.clone(), source })?;
        }
        let save_err = |path: PathBuf| move |source| ManifestError::Image { path, source };
        let img_file = dir.join(&image_path);
        sample.image.save(&img_file).map_err(save_err(img_file.clone()))?;
        let mask_file = dir.join(&mask_path);
        sample.mask.to_image().save(&mask_file).map_err(save_err(mask_file.clone()))?;
        Ok(ManifestRecord {
            patch_id,
            wsi_id: sample.spec.wsi_id.clone(),
            scanner,
            origin_x: sample.spec.origin.0,
            origin_y: sample.spec.origin.1,
            level: sample.spec.working_level,
            size: sample.spec.size,
            context_ratio: sample.context_ratio,
            augmentation_tag: sample.augmentation_tag,
            normalization_tag: sample.normalization_tag,
            image_path,
            mask_path,
            seed_roi: sample.spec.seed_roi.clone(),
            source_rois: sample.spec.source_rois.clone(),
            duplicate_of: None,
        })
    }
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), ManifestError> {
    let io_err = |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for rec in records {
        serde_json::to_writer(&mut out, rec).map_err(|source| ManifestError::Parse {
            path: path.to_path_buf(),
            line: 0,
            source,
        })?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, ManifestError> {
    let io_err = |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|source| ManifestError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            source,
        })?);
    }
    Ok(records)
}
