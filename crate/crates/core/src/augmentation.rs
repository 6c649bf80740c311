//! ROI-shifting augmentation.
//!
//! Each object patch is re-windowed four times so the seed ROI's mask
//! bounding box sits flush against one corner (TL, TR, BL, BR). Variants
//! re-read the slide at the shifted origin, so neighbouring tissue and
//! neighbouring ROIs are real context, never padding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::PolygonRoi;
use crate::tiling::{self, rasterize_mask, AugmentationTag, PatchSample, PatchSpec, TilingError};
use crate::wsi::{Slide, WsiError};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("bbox {bbox:?} does not fit a {size} px patch with margin {margin}")]
    BBoxTooLarge { bbox: (i64, i64, i64, i64), size: u32, margin: u32 },
    #[error("{0} is already augmented")]
    AlreadyAugmented(String),
    #[error("{0} has no seed ROI")]
    MissingSeedRoi(String),
    #[error("seed ROI of {0} covers no pixel")]
    EmptySeedMask(String),
    #[error(transparent)]
    Wsi(#[from] WsiError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Corner {
    TL,
    TR,
    BL,
    BR,
}

impl Corner {
    pub const ALL: [Corner; 4] = [Corner::TL, Corner::TR, Corner::BL, Corner::BR];

    pub fn tag(self) -> AugmentationTag {
        match self {
            Corner::TL => AugmentationTag::CornerTL,
            Corner::TR => AugmentationTag::CornerTR,
            Corner::BL => AugmentationTag::CornerBL,
            Corner::BR => AugmentationTag::CornerBR,
        }
    }
}

/// Translation `(dx, dy)` that moves the half-open patch-space box
/// `(x0, y0, x1, y1)` flush to `corner`, inset by `margin` pixels.
pub fn shift_offset_for_corner(bbox: (i64, i64, i64, i64), size: u32, corner: Corner, margin: u32) -> Result<(i64, i64), AugmentError> {
    let (x0, y0, x1, y1) = bbox;
    let (s, m) = (size as i64, margin as i64);
    let fits = x0 >= 0 && y0 >= 0 && x1 > x0 && y1 > y0 && x1 <= s && y1 <= s && (x1 - x0) + m <= s && (y1 - y0) + m <= s;
    if !fits {
        return Err(AugmentError::BBoxTooLarge { bbox, size, margin });
    }
    let left = m - x0;
    let right = s - m - x1;
    let top = m - y0;
    let bottom = s - m - y1;
    Ok(match corner {
        Corner::TL => (left, top),
        Corner::TR => (right, top),
        Corner::BL => (left, bottom),
        Corner::BR => (right, bottom),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedVariant {
    pub patch_id: String,
    pub corner: Corner,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ShiftOutcome {
    pub variants: Vec<PatchSample>,
    pub dropped: Vec<DroppedVariant>,
}

/// Mask of the seed ROI alone within `spec`.
pub fn seed_mask(sample: &PatchSample, slide: &Slide, rois: &[PolygonRoi]) -> Result<crate::mask::BinaryMask, AugmentError> {
    let id = sample.patch_id();
    let seed = sample.spec.seed_roi.as_ref().ok_or_else(|| AugmentError::MissingSeedRoi(id.clone()))?;
    let roi = rois.iter().find(|r| &r.roi_id == seed).ok_or_else(|| AugmentError::MissingSeedRoi(id.clone()))?;
    Ok(rasterize_mask(std::slice::from_ref(roi), &sample.spec, slide.record())?)
}

/// The four corner variants of an un-augmented object patch, in TL, TR,
/// BL, BR order. Variants whose window leaves the slide are dropped and
/// reported in [`ShiftOutcome::dropped`].
pub fn roi_shift_variants(sample: &PatchSample, slide: &Slide, rois: &[PolygonRoi], margin: u32) -> Result<ShiftOutcome, AugmentError> {
    let id = sample.patch_id();
    if sample.augmentation_tag != AugmentationTag::None {
        return Err(AugmentError::AlreadyAugmented(id));
    }
    let seed = seed_mask(sample, slide, rois)?;
    let (x0, y0, x1, y1) = seed.foreground_bbox().ok_or_else(|| AugmentError::EmptySeedMask(id.clone()))?;
    let bbox = (x0 as i64, y0 as i64, x1 as i64, y1 as i64);
    let size = sample.spec.size.px();
    let ds = slide.record().downsample(sample.spec.working_level)? as i64;

    let mut outcome = ShiftOutcome::default();
    for corner in Corner::ALL {
        let (dx, dy) = shift_offset_for_corner(bbox, size, corner, margin)?;
        // content moves by +d, so the window moves by -d
        let spec = PatchSpec {
            origin: (sample.spec.origin.0 - dx * ds, sample.spec.origin.1 - dy * ds),
            ..sample.spec.clone()
        };
        match tiling::materialize(slide, rois, spec, corner.tag()) {
            Ok(mut variant) => {
                variant.normalization_tag = sample.normalization_tag;
                outcome.variants.push(variant)
            }
            Err(WsiError::OutOfBounds { .. }) => {
                log::info!("{id}: {corner:?} variant leaves the slide, dropped");
                outcome.dropped.push(DroppedVariant {
                    patch_id: id.clone(),
                    corner,
                    reason: "shifted window outside slide".into(),
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(outcome)
}

/// Augments every object patch of one slide. Background patches (no seed
/// ROI) pass through untouched; output order is (input order, corner order).
pub fn augment_samples(samples: &[PatchSample], slide: &Slide, rois: &[PolygonRoi], margin: u32, workers: usize) -> Result<ShiftOutcome, AugmentError> {
    let per_sample = tiling::with_workers(workers, || {
        samples
            .par_iter()
            .filter(|s| s.spec.seed_roi.is_some())
            .map(|s| roi_shift_variants(s, slide, rois, margin))
            .collect::<Result<Vec<_>, _>>()
    })??;
    let mut all = ShiftOutcome::default();
    for o in per_sample {
        all.variants.extend(o.variants);
        all.dropped.extend(o.dropped);
    }
    Ok(all)
}
