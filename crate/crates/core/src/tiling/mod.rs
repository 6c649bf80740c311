//! ROI-guided patch extraction at the working (20x) level.
//!
//! Every ROI seeds exactly one patch centered on its area centroid and
//! clamped into the slide. The ground-truth mask of a patch is the union of
//! every ROI reaching into it, not only the seed.

mod manifest;

pub use manifest::{read_manifest, write_manifest, ManifestError, ManifestRecord};

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{bounding_box, centroid, BBox, PolygonRoi};
use crate::mask::BinaryMask;
use crate::wsi::{Slide, WsiError, WsiRecord};

pub const WORKING_MAGNIFICATION: f64 = 20.0;

#[derive(Debug, Error)]
pub enum TilingError {
    #[error(transparent)]
    Wsi(#[from] WsiError),
    #[error("ROI {roi_id} belongs to {roi_wsi}, not {wsi_id}")]
    WsiMismatch {
        roi_id: String,
        roi_wsi: String,
        wsi_id: String,
    },
    #[error("level {level} of {wsi_id} ({width}x{height}) is smaller than a {size} px patch")]
    LevelTooSmall {
        wsi_id: String,
        level: usize,
        width: u32,
        height: u32,
        size: u32,
    },
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum PatchSize {
    S128,
    S256,
}

impl PatchSize {
    pub fn px(self) -> u32 {
        match self {
            PatchSize::S128 => 128,
            PatchSize::S256 => 256,
        }
    }
}

impl TryFrom<u32> for PatchSize {
    type Error = String;

    fn try_from(v: u32) -> Result<Self, Self::Error> {
        match v {
            128 => Ok(PatchSize::S128),
            256 => Ok(PatchSize::S256),
            other => Err(format!("patch size must be 128 or 256, got {other}")),
        }
    }
}

impl From<PatchSize> for u32 {
    fn from(s: PatchSize) -> u32 {
        s.px()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AugmentationTag {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "corner_TL")]
    CornerTL,
    #[serde(rename = "corner_TR")]
    CornerTR,
    #[serde(rename = "corner_BL")]
    CornerBL,
    #[serde(rename = "corner_BR")]
    CornerBR,
}

impl AugmentationTag {
    pub fn as_str(self) -> &'static str {
        match self {
            AugmentationTag::None => "none",
            AugmentationTag::CornerTL => "corner_TL",
            AugmentationTag::CornerTR => "corner_TR",
            AugmentationTag::CornerBL => "corner_BL",
            AugmentationTag::CornerBR => "corner_BR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationTag {
    Raw,
    Macenko,
    Vahadane,
}

impl NormalizationTag {
    pub fn as_str(self) -> &'static str {
        match self {
            NormalizationTag::Raw => "raw",
            NormalizationTag::Macenko => "macenko",
            NormalizationTag::Vahadane => "vahadane",
        }
    }
}

impl fmt::Display for NormalizationTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormalizationTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(NormalizationTag::Raw),
            "macenko" => Ok(NormalizationTag::Macenko),
            "vahadane" => Ok(NormalizationTag::Vahadane),
            other => Err(format!("unknown normalization `{other}` (raw|macenko|vahadane)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub wsi_id: String,
    /// Top-left corner in level-0 pixels; always a multiple of the working
    /// level's downsample.
    pub origin: (i64, i64),
    pub size: PatchSize,
    pub working_level: usize,
    /// ROIs whose bounds reach into the patch, sorted by id.
    pub source_rois: Vec<String>,
    /// ROI the patch was placed on; `None` for background patches.
    pub seed_roi: Option<String>,
}

impl PatchSpec {
    /// Patch footprint in level-0 pixels.
    pub fn footprint(&self, wsi: &WsiRecord) -> Result<BBox, WsiError> {
        let extent = (self.size.px() * wsi.downsample(self.working_level)?) as f64;
        Ok(BBox {
            min_x: self.origin.0 as f64,
            min_y: self.origin.1 as f64,
            max_x: self.origin.0 as f64 + extent,
            max_y: self.origin.1 as f64 + extent,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub spec: PatchSpec,
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub context_ratio: f64,
    pub augmentation_tag: AugmentationTag,
    pub normalization_tag: NormalizationTag,
}

impl PatchSample {
    pub fn patch_id(&self) -> String {
        let base = match &self.spec.seed_roi {
            Some(roi) => format!("{}__{}__{}", self.spec.wsi_id, roi, self.spec.size.px()),
            None => format!(
                "{}__bg_{}_{}__{}",
                self.spec.wsi_id,
                self.spec.origin.0,
                self.spec.origin.1,
                self.spec.size.px()
            ),
        };
        match self.augmentation_tag {
            AugmentationTag::None => base,
            tag => format!("{base}__{}", tag.as_str()),
        }
    }
}

/// Non-fatal findings recorded while sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TilingWarning {
    RoiLargerThanPatch { roi_id: String, width_px: f64, height_px: f64, size: u32 },
    DuplicatePatch { patch_id: String, duplicate_of: String },
}

#[derive(Debug, Clone, Default)]
pub struct SamplingOutcome {
    pub samples: Vec<PatchSample>,
    pub warnings: Vec<TilingWarning>,
}

#[derive(Debug, Clone)]
pub struct SamplingOptions {
    pub workers: usize,
    /// Random ROI-free patches emitted per slide in addition to the seeds.
    pub negatives_per_wsi: usize,
    pub seed: u64,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        SamplingOptions {
            workers: 1,
            negatives_per_wsi: 0,
            seed: 0,
        }
    }
}

/// Runs `f` on a dedicated pool of `workers` threads. Output order of
/// indexed parallel iterators does not depend on the worker count.
pub(crate) fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, TilingError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| TilingError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Returns the first pixel index whose center `origin + (i + 0.5) * step`
/// is ≥ `bound`, clamped to `[0, n]`.
fn first_center_at_or_after(bound: f64, origin: f64, step: f64, n: u32) -> u32 {
    let center = |i: i64| origin + (i as f64 + 0.5) * step;
    let mut i = ((bound - origin) / step - 0.5).ceil().clamp(-1.0, n as f64 + 1.0) as i64;
    while i > 0 && center(i - 1) >= bound {
        i -= 1;
    }
    while i < n as i64 && center(i) < bound {
        i += 1;
    }
    i.clamp(0, n as i64) as u32
}

/// Scanline fill of one polygon into `mask` (OR). Pixel (i, j) is set when
/// its center `origin + (i + 0.5, j + 0.5) * step` passes the even-odd
/// test of [`crate::annotations::point_in_polygon`].
fn fill_polygon(mask: &mut BinaryMask, roi: &PolygonRoi, origin: (f64, f64), step: f64) {
    let (w, h) = mask.dims();
    let verts = &roi.vertices;
    let n = verts.len();
    let b = bounding_box(verts);
    let row_lo = first_center_at_or_after(b.min_y, origin.1, step, h);
    let mut crossings = Vec::with_capacity(8);
    for row in row_lo..h {
        let y = origin.1 + (row as f64 + 0.5) * step;
        if y > b.max_y {
            break;
        }
        crossings.clear();
        let mut j = n - 1;
        for i in 0..n {
            let (a, c) = (verts[i], verts[j]);
            if (a.y > y) != (c.y > y) {
                crossings.push(a.x + (y - a.y) * (c.x - a.x) / (c.y - a.y));
            }
            j = i;
        }
        crossings.sort_by(f64::total_cmp);
        for pair in crossings.chunks_exact(2) {
            let lo = first_center_at_or_after(pair[0], origin.0, step, w);
            let hi = first_center_at_or_after(pair[1], origin.0, step, w);
            for col in lo..hi {
                mask.set(col, row, true);
            }
        }
    }
}

/// Rasterizes the union of `rois` into the patch grid of `spec`.
pub fn rasterize_mask(rois: &[PolygonRoi], spec: &PatchSpec, wsi: &WsiRecord) -> Result<BinaryMask, WsiError> {
    let size = spec.size.px();
    let step = wsi.downsample(spec.working_level)? as f64;
    let footprint = spec.footprint(wsi)?;
    let origin = (spec.origin.0 as f64, spec.origin.1 as f64);
    let mut mask = BinaryMask::zeros(size, size);
    for roi in rois.iter().filter(|r| r.wsi_id == spec.wsi_id) {
        if bounding_box(&roi.vertices).intersects(&footprint) {
            fill_polygon(&mut mask, roi, origin, step);
        }
    }
    Ok(mask)
}

/// Foreground fraction of the mask.
pub fn context_ratio(mask: &BinaryMask) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.count_ones() as f64 / mask.len() as f64
}

/// ROIs whose bounds reach into the footprint of `origin`/`size`, sorted.
pub(crate) fn intersecting_rois(rois: &[PolygonRoi], footprint: &BBox) -> Vec<String> {
    let mut ids: Vec<String> = rois
        .iter()
        .filter(|r| bounding_box(&r.vertices).intersects(footprint))
        .map(|r| r.roi_id.clone())
        .collect();
    ids.sort();
    ids.dedup();
    ids
}

/// Reads the window and rasterizes the union mask for a placed spec.
pub(crate) fn materialize(slide: &Slide, rois: &[PolygonRoi], mut spec: PatchSpec, tag: AugmentationTag) -> Result<PatchSample, WsiError> {
    let wsi = slide.record();
    let image = slide.read_region(spec.origin, spec.size.px(), spec.working_level)?;
    let footprint = spec.footprint(wsi)?;
    spec.source_rois = intersecting_rois(rois, &footprint);
    let mask = rasterize_mask(rois, &spec, wsi)?;
    let context_ratio = context_ratio(&mask);
    Ok(PatchSample {
        spec,
        image,
        mask,
        context_ratio,
        augmentation_tag: tag,
        normalization_tag: NormalizationTag::Raw,
    })
}

fn check_level(wsi: &WsiRecord, level: usize, size: u32) -> Result<(u32, u32), TilingError> {
    let (w, h) = wsi.level_dims(level)?;
    if w < size || h < size {
        return Err(TilingError::LevelTooSmall {
            wsi_id: wsi.wsi_id.clone(),
            level,
            width: w,
            height: h,
            size,
        });
    }
    Ok((w, h))
}

/// Level-0 origin of a `size` patch centered on `roi`'s centroid at
/// `level`, clamped into the level.
pub fn centered_origin(roi: &PolygonRoi, wsi: &WsiRecord, size: PatchSize, level: usize) -> Result<(i64, i64), TilingError> {
    let size_px = size.px();
    let (w, h) = check_level(wsi, level, size_px)?;
    let ds = wsi.downsample(level)? as f64;
    let c = centroid(&roi.vertices);
    let place = |center: f64, extent: u32| -> i64 {
        let start = (center / ds - size_px as f64 / 2.0).round() as i64;
        start.clamp(0, (extent - size_px) as i64)
    };
    Ok((place(c.x, w) * ds as i64, place(c.y, h) * ds as i64))
}

/// One base patch per ROI (plus optional background patches), ordered by
/// `(wsi_id, roi_id)`.
pub fn sample_patches(
    slide: &Slide,
    rois: &[PolygonRoi],
    size: PatchSize,
    level: usize,
    options: &SamplingOptions,
) -> Result<SamplingOutcome, TilingError> {
    let wsi = slide.record();
    if let Some(r) = rois.iter().find(|r| r.wsi_id != wsi.wsi_id) {
        return Err(TilingError::WsiMismatch {
            roi_id: r.roi_id.clone(),
            roi_wsi: r.wsi_id.clone(),
            wsi_id: wsi.wsi_id.clone(),
        });
    }
    check_level(wsi, level, size.px())?;
    let ds = wsi.downsample(level)? as f64;

    let mut seeds: Vec<&PolygonRoi> = rois.iter().collect();
    seeds.sort_by(|a, b| a.roi_id.cmp(&b.roi_id));

    let mut warnings = Vec::new();
    for roi in &seeds {
        let b = bounding_box(&roi.vertices);
        let (bw, bh) = (b.width() / ds, b.height() / ds);
        if bw > size.px() as f64 || bh > size.px() as f64 {
            warnings.push(TilingWarning::RoiLargerThanPatch {
                roi_id: roi.roi_id.clone(),
                width_px: bw,
                height_px: bh,
                size: size.px(),
            });
        }
    }

    let mut specs = Vec::with_capacity(seeds.len());
    for roi in &seeds {
        specs.push(PatchSpec {
            wsi_id: wsi.wsi_id.clone(),
            origin: centered_origin(roi, wsi, size, level)?,
            size,
            working_level: level,
            source_rois: Vec::new(),
            seed_roi: Some(roi.roi_id.clone()),
        });
    }
    specs.extend(background_specs(wsi, rois, size, level, options)?);

    let samples = with_workers(options.workers, || {
        specs
            .into_par_iter()
            .map(|spec| materialize(slide, rois, spec, AugmentationTag::None))
            .collect::<Result<Vec<_>, _>>()
    })??;

    let mut seen: std::collections::HashMap<(i64, i64), String> = Default::default();
    for s in &samples {
        let id = s.patch_id();
        match seen.get(&s.spec.origin) {
            Some(first) => warnings.push(TilingWarning::DuplicatePatch {
                patch_id: id,
                duplicate_of: first.clone(),
            }),
            None => {
                seen.insert(s.spec.origin, id);
            }
        }
    }
    Ok(SamplingOutcome { samples, warnings })
}

fn background_specs(
    wsi: &WsiRecord,
    rois: &[PolygonRoi],
    size: PatchSize,
    level: usize,
    options: &SamplingOptions,
) -> Result<Vec<PatchSpec>, TilingError> {
    if options.negatives_per_wsi == 0 {
        return Ok(Vec::new());
    }
    let (w, h) = check_level(wsi, level, size.px())?;
    let ds = wsi.downsample(level)? as i64;
    let salt = wsi.wsi_id.bytes().fold(0xcbf29ce484222325u64, |acc, b| (acc ^ b as u64).wrapping_mul(0x100000001b3));
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ salt);
    let boxes: Vec<BBox> = rois.iter().map(|r| bounding_box(&r.vertices)).collect();
    let mut specs: Vec<PatchSpec> = Vec::new();
    let attempts = 50 * options.negatives_per_wsi;
    for _ in 0..attempts {
        if specs.len() == options.negatives_per_wsi {
            break;
        }
        let x = rng.random_range(0..=(w - size.px())) as i64 * ds;
        let y = rng.random_range(0..=(h - size.px())) as i64 * ds;
        let spec = PatchSpec {
            wsi_id: wsi.wsi_id.clone(),
            origin: (x, y),
            size,
            working_level: level,
            source_rois: Vec::new(),
            seed_roi: None,
        };
        let fp = spec.footprint(wsi)?;
        if boxes.iter().any(|b| b.intersects(&fp)) || specs.iter().any(|s| s.origin == spec.origin) {
            continue;
        }
        specs.push(spec);
    }
    if specs.len() < options.negatives_per_wsi {
        log::warn!(
            "{}: only {} of {} background patches found",
            wsi.wsi_id,
            specs.len(),
            options.negatives_per_wsi
        );
    }
    Ok(specs)
}
