//! Content-addressed stages: synth → ingest → tile → augment → normalize →
//! split → evaluate → aggregate.
//!
//! Each stage writes into `<root>/<stage>/<digest>/`, where the digest covers
//! the tool version, the stage parameters and the digests (or file contents)
//! of its inputs. A finished stage leaves a `.done` marker; a later run with
//! the same digest reuses the directory instead of recomputing it.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Display;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotations::{parse_annotation_file, PolygonRoi};
use crate::augmentation::augment_samples;
use crate::baseline::DabThreshold;
use crate::config::{Config, ConfigError, SplitMode};
use crate::folds::{build_fold_plan, build_scanner_plan, materialize_run, verify_plan, FoldPlan, RunDataset, Violation};
use crate::mask::{BinaryMask, ProbMap};
use crate::metrics::{
    aggregate_records, binarize, confusion_counts, emit_table, read_table, scores_from_counts, ConfusionCounts, Granularity, MetricsRecord,
};
use crate::stain::{
    estimate_stains_macenko, estimate_stains_vahadane, macenko_from_od, normalize_to_reference, rgb_to_od, vahadane_from_od, MacenkoParams,
    StainError, StainMethod, StainProfile, VahadaneParams, DEFAULT_IO,
};
use crate::synth::{make_synthetic_cohort, SynthSpec};
use crate::tiling::{
    read_manifest, sample_patches, with_workers, write_manifest, AugmentationTag, ManifestRecord, NormalizationTag, PatchSample, PatchSize, PatchSpec,
    SamplingOptions, TilingWarning, WORKING_MAGNIFICATION,
};
use crate::wsi::{Scanner, Slide, WsiRecord};

pub const ARTIFACT_ROOT_ENV: &str = "PLAQUEKIT_ARTIFACT_ROOT";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

const DONE_MARKER: &str = ".done";
/// Upper bound on pooled pixels used to estimate one slide's stains.
const MAX_POOLED_PIXELS: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage} failed: {reason}")]
    Stage { stage: &'static str, reason: String },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { .. } => 3,
        }
    }
}

fn fail<E: Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        reason: e.to_string(),
    }
}

fn io_fail<'a>(stage: &'static str, path: &'a Path) -> impl Fn(io::Error) -> PipelineError + 'a {
    move |e| PipelineError::Stage {
        stage,
        reason: format!("{}: {e}", path.display()),
    }
}

fn write_json<T: Serialize>(stage: &'static str, path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).map_err(fail(stage))? + "\n";
    fs::write(path, text).map_err(io_fail(stage, path))
}

fn read_json<T: for<'de> Deserialize<'de>>(stage: &'static str, path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_fail(stage, path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Stage {
        stage,
        reason: format!("{}: {e}", path.display()),
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a stage: version, stage name and a JSON value of parameters
/// and input digests. `serde_json` maps are ordered, so the text is
/// canonical.
pub fn stage_digest(stage: &str, params: &serde_json::Value) -> String {
    sha256_hex(json!({ "tool": "plaquekit", "version": VERSION, "stage": stage, "params": params }).to_string().as_bytes())
}

/// Digest of every file under `dir` (relative path and bytes), skipping
/// dot-files.
pub fn hash_tree(dir: &Path) -> io::Result<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            if entry.file_name().to_string_lossy().starts_with('.') {
                continue;
            }
            let path = entry.path();
            if entry.file_type()?.is_dir() {
                walk(base, &path, out)?;
            } else {
                out.push(path.strip_prefix(base).expect("under base").to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = fs::read(dir.join(&rel))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn hash_file(path: &Path) -> io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Executed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub digest: String,
    pub status: StageStatus,
    /// Output directory relative to the artifact root.
    pub output: PathBuf,
}

/// Runs `body` into a fresh directory unless `<root>/<stage>/<digest>` is
/// already complete.
pub fn run_stage(
    root: &Path,
    stage: &'static str,
    digest: String,
    body: impl FnOnce(&Path) -> Result<(), PipelineError>,
) -> Result<(StageReport, PathBuf), PipelineError> {
    let rel = PathBuf::from(stage).join(&digest[..16]);
    let dir = root.join(&rel);
    let report = |status| StageReport {
        stage: stage.to_string(),
        digest: digest.clone(),
        status,
        output: rel.clone(),
    };
    if dir.join(DONE_MARKER).is_file() {
        log::info!("{stage}: up to date ({})", &digest[..16]);
        return Ok((report(StageStatus::Skipped), dir));
    }
    let tmp = root.join(stage).join(format!(".tmp-{}", &digest[..16]));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_fail(stage, &tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io_fail(stage, &tmp))?;
    log::info!("{stage}: running ({})", &digest[..16]);
    body(&tmp)?;
    fs::write(tmp.join(DONE_MARKER), format!("{digest}\n")).map_err(io_fail(stage, &tmp))?;
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_fail(stage, &dir))?;
    }
    fs::rename(&tmp, &dir).map_err(io_fail(stage, &dir))?;
    Ok((report(StageStatus::Executed), dir))
}

// ---------------------------------------------------------------- ingest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestedSlide {
    pub record: WsiRecord,
    pub rois: Vec<PolygonRoi>,
}

/// Ingested cohort. `ingest.json` holds only the slides; the cohort
/// directory is bound when loading so the file does not depend on where
/// the cohort lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ingested {
    #[serde(skip)]
    pub cohort_dir: PathBuf,
    pub slides: Vec<IngestedSlide>,
}

impl Ingested {
    pub fn load(path: &Path, cohort_dir: &Path) -> Result<Self, PipelineError> {
        let mut ing: Ingested = read_json("ingest", path)?;
        ing.cohort_dir = cohort_dir.canonicalize().map_err(io_fail("ingest", cohort_dir))?;
        Ok(ing)
    }

    pub fn records(&self) -> Vec<WsiRecord> {
        self.slides.iter().map(|s| s.record.clone()).collect()
    }

    fn slide(&self, wsi_id: &str) -> Result<(&IngestedSlide, Slide), PipelineError> {
        let s = self.slides.iter().find(|s| s.record.wsi_id == wsi_id).ok_or_else(|| PipelineError::Stage {
            stage: "ingest",
            reason: format!("unknown slide {wsi_id}"),
        })?;
        let slide = Slide::open(s.record.clone(), &self.cohort_dir).map_err(fail("ingest"))?;
        Ok((s, slide))
    }
}

/// Reads every `<wsi_id>.meta` sidecar in `cohort_dir` with its
/// `<wsi_id>.xml` annotations, keeping ROIs whose label is `label`.
pub fn ingest_cohort(cohort_dir: &Path, label: &str) -> Result<Ingested, PipelineError> {
    const STAGE: &str = "ingest";
    let mut metas: Vec<PathBuf> = fs::read_dir(cohort_dir)
        .map_err(io_fail(STAGE, cohort_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "meta"))
        .collect();
    metas.sort();
    if metas.is_empty() {
        return Err(PipelineError::Stage {
            stage: STAGE,
            reason: format!("no .meta sidecars in {}", cohort_dir.display()),
        });
    }
    let mut slides = Vec::with_capacity(metas.len());
    for meta in metas {
        let text = fs::read_to_string(&meta).map_err(io_fail(STAGE, &meta))?;
        let record = WsiRecord::from_sidecar(&text).map_err(|e| PipelineError::Stage {
            stage: STAGE,
            reason: format!("{}: {e}", meta.display()),
        })?;
        let xml_path = cohort_dir.join(format!("{}.xml", record.wsi_id));
        let rois = if xml_path.is_file() {
            let xml = fs::read_to_string(&xml_path).map_err(io_fail(STAGE, &xml_path))?;
            let all = parse_annotation_file(&xml, &record).map_err(|e| PipelineError::Stage {
                stage: STAGE,
                reason: format!("{}: {e}", xml_path.display()),
            })?;
            let total = all.len();
            let kept: Vec<PolygonRoi> = all.into_iter().filter(|r| r.label == label).collect();
            if kept.len() < total {
                log::info!("{}: kept {} of {total} ROIs labelled {label}", record.wsi_id, kept.len());
            }
            kept
        } else {
            log::warn!("{}: no annotation file", record.wsi_id);
            Vec::new()
        };
        slides.push(IngestedSlide { record, rois });
    }
    let cohort_dir = cohort_dir.canonicalize().map_err(io_fail(STAGE, cohort_dir))?;
    Ok(Ingested { cohort_dir, slides })
}

// ------------------------------------------------------------------ tile

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileParams {
    pub size: PatchSize,
    pub negatives_per_wsi: usize,
    pub seed: u64,
    #[serde(skip)]
    pub workers: usize,
}

fn persist_all(stage: &'static str, samples: &[PatchSample], scanner: Scanner, out: &Path, workers: usize) -> Result<Vec<ManifestRecord>, PipelineError> {
    with_workers(workers, || {
        samples
            .par_iter()
            .map(|s| ManifestRecord::persist(s, scanner, out))
            .collect::<Result<Vec<_>, _>>()
    })
    .map_err(fail(stage))?
    .map_err(fail(stage))
}

/// Samples one base patch per ROI of every slide and writes
/// `manifest.jsonl`, `images/`, `masks/` and `warnings.json` into `out`.
pub fn tile_stage(ing: &Ingested, p: &TileParams, out: &Path) -> Result<Vec<ManifestRecord>, PipelineError> {
    const STAGE: &str = "tile";
    let mut records = Vec::new();
    let mut warnings: Vec<serde_json::Value> = Vec::new();
    for s in &ing.slides {
        let (_, slide) = ing.slide(&s.record.wsi_id)?;
        let level = s.record.nearest_level(WORKING_MAGNIFICATION);
        let options = SamplingOptions {
            workers: p.workers,
            negatives_per_wsi: p.negatives_per_wsi,
            seed: p.seed,
        };
        let outcome = sample_patches(&slide, &s.rois, p.size, level, &options).map_err(|e| PipelineError::Stage {
            stage: STAGE,
            reason: format!("{}: {e}", s.record.wsi_id),
        })?;
        let mut recs = persist_all(STAGE, &outcome.samples, s.record.scanner, out, p.workers)?;
        for w in &outcome.warnings {
            if let TilingWarning::DuplicatePatch { patch_id, duplicate_of } = w {
                if let Some(r) = recs.iter_mut().find(|r| &r.patch_id == patch_id) {
                    r.duplicate_of = Some(duplicate_of.clone());
                }
            }
            warnings.push(json!({ "wsi_id": s.record.wsi_id, "warning": w }));
        }
        records.extend(recs);
    }
    if records.is_empty() {
        return Err(PipelineError::Stage {
            stage: STAGE,
            reason: "no patches sampled (no ROIs with the configured label?)".into(),
        });
    }
    write_manifest(&out.join("manifest.jsonl"), &records).map_err(fail(STAGE))?;
    write_json(STAGE, &out.join("warnings.json"), &warnings)?;
    Ok(records)
}

// --------------------------------------------------------------- augment

fn load_rgb(stage: &'static str, path: &Path) -> Result<RgbImage, PipelineError> {
    Ok(image::open(path)
        .map_err(|e| PipelineError::Stage {
            stage,
            reason: format!("{}: {e}", path.display()),
        })?
        .to_rgb8())
}

fn load_mask(stage: &'static str, path: &Path) -> Result<BinaryMask, PipelineError> {
    let img = image::open(path).map_err(|e| PipelineError::Stage {
        stage,
        reason: format!("{}: {e}", path.display()),
    })?;
    Ok(BinaryMask::from_image(&img.to_luma8()))
}

fn load_sample(stage: &'static str, rec: &ManifestRecord, dir: &Path) -> Result<PatchSample, PipelineError> {
    Ok(PatchSample {
        spec: PatchSpec {
            wsi_id: rec.wsi_id.clone(),
            origin: (rec.origin_x, rec.origin_y),
            size: rec.size,
            working_level: rec.level,
            source_rois: rec.source_rois.clone(),
            seed_roi: rec.seed_roi.clone(),
        },
        image: load_rgb(stage, &dir.join(&rec.image_path))?,
        mask: load_mask(stage, &dir.join(&rec.mask_path))?,
        context_ratio: rec.context_ratio,
        augmentation_tag: rec.augmentation_tag,
        normalization_tag: rec.normalization_tag,
    })
}

fn copy_patch_files(stage: &'static str, rec: &ManifestRecord, from: &Path, to: &Path) -> Result<(), PipelineError> {
    for rel in [&rec.image_path, &rec.mask_path] {
        let dst = to.join(rel);
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent).map_err(io_fail(stage, parent))?;
        }
        fs::copy(from.join(rel), &dst).map_err(io_fail(stage, &dst))?;
    }
    Ok(())
}

/// Copies the base patches of `manifest_dir` into `out` and appends the
/// four ROI-shift variants of each object patch.
pub fn augment_stage(ing: &Ingested, manifest_dir: &Path, margin: u32, workers: usize, out: &Path) -> Result<Vec<ManifestRecord>, PipelineError> {
    const STAGE: &str = "augment";
    let base = read_manifest(&manifest_dir.join("manifest.jsonl")).map_err(fail(STAGE))?;
    let mut variants = Vec::new();
    let mut dropped = Vec::new();
    for rec in &base {
        if rec.augmentation_tag != AugmentationTag::None {
            return Err(PipelineError::Stage {
                stage: STAGE,
                reason: format!("{} is already augmented", rec.patch_id),
            });
        }
        copy_patch_files(STAGE, rec, manifest_dir, out)?;
    }
    for s in &ing.slides {
        let own: Vec<&ManifestRecord> = base.iter().filter(|r| r.wsi_id == s.record.wsi_id).collect();
        if own.is_empty() {
            continue;
        }
        let (_, slide) = ing.slide(&s.record.wsi_id)?;
        let samples = own.iter().map(|r| load_sample(STAGE, r, manifest_dir)).collect::<Result<Vec<_>, _>>()?;
        let outcome = augment_samples(&samples, &slide, &s.rois, margin, workers).map_err(|e| PipelineError::Stage {
            stage: STAGE,
            reason: format!("{}: {e}", s.record.wsi_id),
        })?;
        variants.extend(persist_all(STAGE, &outcome.variants, s.record.scanner, out, workers)?);
        dropped.extend(outcome.dropped);
    }
    let mut records = base;
    records.extend(variants);
    write_manifest(&out.join("manifest.jsonl"), &records).map_err(fail(STAGE))?;
    write_json(STAGE, &out.join("dropped.json"), &dropped)?;
    Ok(records)
}

// ------------------------------------------------------------- normalize

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizeParams {
    pub method: StainMethod,
    /// Single reference for every scanner.
    pub reference_profile: Option<StainProfile>,
    /// Reference patch per scanner; defaults to the first base patch (by id)
    /// of that scanner with enough tissue.
    pub reference_patches: BTreeMap<Scanner, String>,
    pub workers: usize,
}

fn estimate(method: StainMethod, od: &[[f64; 3]]) -> Result<StainProfile, StainError> {
    match method {
        StainMethod::Macenko => macenko_from_od(od, &MacenkoParams::default()),
        StainMethod::Vahadane => {
            let fit = vahadane_from_od(od, &VahadaneParams::default())?;
            if !fit.converged {
                log::warn!("sparse stain fit stopped at the iteration limit");
            }
            Ok(fit.profile)
        }
    }
}

fn estimate_image(method: StainMethod, img: &RgbImage) -> Result<StainProfile, StainError> {
    match method {
        StainMethod::Macenko => estimate_stains_macenko(img, &MacenkoParams::default()),
        StainMethod::Vahadane => estimate_stains_vahadane(img, &VahadaneParams::default()).map(|f| f.profile),
    }
}

/// Normalizes every patch of `manifest_dir` into `out`: each slide's stains
/// are estimated from its pooled base patches and mapped onto the reference
/// profile of its scanner.
pub fn normalize_stage(manifest_dir: &Path, p: &NormalizeParams, out: &Path) -> Result<Vec<ManifestRecord>, PipelineError> {
    const STAGE: &str = "normalize";
    let records = read_manifest(&manifest_dir.join("manifest.jsonl")).map_err(fail(STAGE))?;
    let tag = match p.method {
        StainMethod::Macenko => NormalizationTag::Macenko,
        StainMethod::Vahadane => NormalizationTag::Vahadane,
    };
    let profiles_dir = out.join("profiles");
    fs::create_dir_all(&profiles_dir).map_err(io_fail(STAGE, &profiles_dir))?;

    let mut by_wsi: BTreeMap<&str, Vec<&ManifestRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.augmentation_tag == AugmentationTag::None) {
        by_wsi.entry(r.wsi_id.as_str()).or_default().push(r);
    }
    let mut sources: HashMap<String, StainProfile> = HashMap::new();
    for (wsi, recs) in &by_wsi {
        let mut pooled = Vec::new();
        for r in recs {
            pooled.extend(rgb_to_od(&load_rgb(STAGE, &manifest_dir.join(&r.image_path))?, DEFAULT_IO).data);
        }
        let stride = pooled.len().div_ceil(MAX_POOLED_PIXELS).max(1);
        let sampled: Vec<[f64; 3]> = pooled.into_iter().step_by(stride).collect();
        let mut profile = estimate(p.method, &sampled).map_err(|e| PipelineError::Stage {
            stage: STAGE,
            reason: format!("{wsi}: {e}"),
        })?;
        profile.reference_id = Some(wsi.to_string());
        profile.save(&profiles_dir.join(format!("{wsi}.json"))).map_err(fail(STAGE))?;
        sources.insert(wsi.to_string(), profile);
    }

    let mut references: BTreeMap<Scanner, StainProfile> = BTreeMap::new();
    let scanners: std::collections::BTreeSet<Scanner> = records.iter().map(|r| r.scanner).collect();
    for scanner in scanners {
        let reference = if let Some(profile) = &p.reference_profile {
            profile.clone()
        } else {
            let mut candidates: Vec<&ManifestRecord> = records
                .iter()
                .filter(|r| r.scanner == scanner && r.augmentation_tag == AugmentationTag::None)
                .collect();
            candidates.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
            if let Some(id) = p.reference_patches.get(&scanner) {
                candidates.retain(|r| &r.patch_id == id);
                if candidates.is_empty() {
                    return Err(PipelineError::Stage {
                        stage: STAGE,
                        reason: format!("reference patch {id} for {scanner} not in manifest"),
                    });
                }
            }
            let mut found = None;
            for r in candidates {
                match estimate_image(p.method, &load_rgb(STAGE, &manifest_dir.join(&r.image_path))?) {
                    Ok(mut profile) => {
                        profile.reference_id = Some(r.patch_id.clone());
                        found = Some(profile);
                        break;
                    }
                    Err(e) => log::info!("{}: not usable as reference ({e})", r.patch_id),
                }
            }
            found.ok_or_else(|| PipelineError::Stage {
                stage: STAGE,
                reason: format!("no usable reference patch for {scanner}"),
            })?
        };
        if reference.method != p.method {
            return Err(PipelineError::Stage {
                stage: STAGE,
                reason: StainError::MethodMismatch {
                    source_method: p.method,
                    reference_method: reference.method,
                }
                .to_string(),
            });
        }
        reference.save(&profiles_dir.join(format!("reference_{scanner}.json"))).map_err(fail(STAGE))?;
        references.insert(scanner, reference);
    }

    let normalized: Vec<ManifestRecord> = with_workers(p.workers, || {
        records
            .par_iter()
            .map(|r| {
                let source = sources.get(&r.wsi_id).ok_or_else(|| PipelineError::Stage {
                    stage: STAGE,
                    reason: format!("{}: slide has no base patches to estimate stains from", r.patch_id),
                })?;
                let img = load_rgb(STAGE, &manifest_dir.join(&r.image_path))?;
                let out_img = normalize_to_reference(&img, source, &references[&r.scanner]).map_err(fail(STAGE))?;
                let mut rec = r.clone();
                rec.normalization_tag = tag;
                copy_patch_files(STAGE, r, manifest_dir, out)?;
                let dst = out.join(&rec.image_path);
                out_img.save(&dst).map_err(|e| PipelineError::Stage {
                    stage: STAGE,
                    reason: format!("{}: {e}", dst.display()),
                })?;
                Ok(rec)
            })
            .collect::<Result<Vec<_>, PipelineError>>()
    })
    .map_err(fail(STAGE))??;
    write_manifest(&out.join("manifest.jsonl"), &normalized).map_err(fail(STAGE))?;
    Ok(normalized)
}

/// Copies the patches of `manifest_dir` into `out` unchanged, for the raw
/// (no normalization) arm.
pub fn copy_stage(manifest_dir: &Path, out: &Path) -> Result<Vec<ManifestRecord>, PipelineError> {
    const STAGE: &str = "normalize";
    let records = read_manifest(&manifest_dir.join("manifest.jsonl")).map_err(fail(STAGE))?;
    for r in &records {
        copy_patch_files(STAGE, r, manifest_dir, out)?;
    }
    write_manifest(&out.join("manifest.jsonl"), &records).map_err(fail(STAGE))?;
    Ok(records)
}

// ----------------------------------------------------------------- split

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitParams {
    pub mode: SplitMode,
    pub n_test: usize,
    pub n_cv: usize,
    pub scanner: Option<Scanner>,
    pub seed: u64,
}

pub fn build_plan(wsis: &[WsiRecord], p: &SplitParams) -> Result<FoldPlan, PipelineError> {
    match p.mode {
        SplitMode::Nested => build_fold_plan(wsis, p.n_test, p.n_cv, p.seed),
        SplitMode::Scanner => {
            let scanner = p.scanner.ok_or_else(|| PipelineError::Stage {
                stage: "split",
                reason: "scanner mode needs a scanner".into(),
            })?;
            build_scanner_plan(wsis, scanner, p.n_cv, p.seed)
        }
    }
    .map_err(fail("split"))
}

/// Builds and verifies the fold plan; writes `fold_plan.json`,
/// `datasets/<run>.json` and `violations.json`. Any violation fails the
/// stage.
pub fn split_stage(wsis: &[WsiRecord], manifest: &[ManifestRecord], p: &SplitParams, out: &Path) -> Result<FoldPlan, PipelineError> {
    const STAGE: &str = "split";
    let plan = build_plan(wsis, p)?;
    let violations: Vec<Violation> = verify_plan(&plan, manifest);
    write_json(STAGE, &out.join("violations.json"), &violations)?;
    if !violations.is_empty() {
        return Err(PipelineError::Stage {
            stage: STAGE,
            reason: format!("{} leakage violations, first: {}", violations.len(), violations[0]),
        });
    }
    fs::write(out.join("fold_plan.json"), plan.to_json()).map_err(io_fail(STAGE, out))?;
    let ds_dir = out.join("datasets");
    fs::create_dir_all(&ds_dir).map_err(io_fail(STAGE, &ds_dir))?;
    for run in &plan.runs {
        write_json(STAGE, &ds_dir.join(format!("{}.json", run.name)), &materialize_run(run, manifest))?;
    }
    Ok(plan)
}

// -------------------------------------------------------------- evaluate

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    /// Directory of `<patch_id>.png` probability maps (0–255 ↦ 0–1). The
    /// DAB baseline is used when absent.
    pub pred_dir: Option<PathBuf>,
    pub threshold: f64,
    pub granularity: Granularity,
    pub smooth: f64,
    pub workers: usize,
}

fn patch_counts(rec: &ManifestRecord, manifest_dir: &Path, p: &EvalParams) -> Result<ConfusionCounts, PipelineError> {
    const STAGE: &str = "evaluate";
    let gt = load_mask(STAGE, &manifest_dir.join(&rec.mask_path))?;
    let prob = match &p.pred_dir {
        Some(dir) => {
            let path = dir.join(format!("{}.png", rec.patch_id));
            if !path.is_file() {
                return Err(PipelineError::Stage {
                    stage: STAGE,
                    reason: format!("missing prediction {}", path.display()),
                });
            }
            let img = image::open(&path).map_err(|e| PipelineError::Stage {
                stage: STAGE,
                reason: format!("{}: {e}", path.display()),
            })?;
            ProbMap::from_image(&img.to_luma8())
        }
        None => DabThreshold::default().predict(&load_rgb(STAGE, &manifest_dir.join(&rec.image_path))?),
    };
    confusion_counts(&binarize(&prob, p.threshold), &gt).map_err(|e| PipelineError::Stage {
        stage: STAGE,
        reason: format!("{}: {e}", rec.patch_id),
    })
}

/// One [`MetricsRecord`] per run: dev scores over the validation split,
/// test scores over the test split (absent when the plan has no test
/// split).
pub fn evaluate_runs(manifest_dir: &Path, plan: &FoldPlan, runs: &[String], p: &EvalParams) -> Result<Vec<MetricsRecord>, PipelineError> {
    const STAGE: &str = "evaluate";
    let manifest = read_manifest(&manifest_dir.join("manifest.jsonl")).map_err(fail(STAGE))?;
    let by_id: HashMap<&str, &ManifestRecord> = manifest.iter().map(|r| (r.patch_id.as_str(), r)).collect();
    let datasets: Vec<RunDataset> = runs
        .iter()
        .map(|name| {
            plan.run(name).map(|r| materialize_run(r, &manifest)).ok_or_else(|| PipelineError::Stage {
                stage: STAGE,
                reason: format!("run {name} not in fold plan"),
            })
        })
        .collect::<Result<_, _>>()?;
    let mut needed: Vec<&str> = datasets.iter().flat_map(|d| d.val.iter().chain(&d.test)).map(String::as_str).collect();
    needed.sort();
    needed.dedup();
    let counts: HashMap<&str, ConfusionCounts> = with_workers(p.workers, || {
        needed
            .par_iter()
            .map(|id| Ok((*id, patch_counts(by_id[id], manifest_dir, p)?)))
            .collect::<Result<HashMap<_, _>, PipelineError>>()
    })
    .map_err(fail(STAGE))??;
    let has_test = plan.runs.iter().any(|r| !r.test.is_empty());
    Ok(datasets
        .iter()
        .map(|d| {
            let split = |ids: &[String]| -> Vec<ConfusionCounts> { ids.iter().map(|id| counts[id.as_str()]).collect() };
            let dev = scores_from_counts(&split(&d.val), p.granularity, p.smooth);
            let test = has_test.then(|| scores_from_counts(&split(&d.test), p.granularity, p.smooth));
            MetricsRecord::from_scores(&d.run, &dev, test.as_ref())
        })
        .collect())
}

/// Reads the per-run rows of several tables (summary rows are ignored) and
/// writes one aggregated table.
pub fn aggregate_tables(inputs: &[PathBuf], out: &Path) -> Result<Vec<MetricsRecord>, PipelineError> {
    const STAGE: &str = "aggregate";
    let mut records = Vec::new();
    for path in inputs {
        records.extend(read_table(path).map_err(fail(STAGE))?.records);
    }
    records.sort_by(|a, b| a.fold_name.cmp(&b.fold_name));
    if let Some(w) = records.windows(2).find(|w| w[0].fold_name == w[1].fold_name) {
        return Err(PipelineError::Stage {
            stage: STAGE,
            reason: format!("run {} appears twice", w[0].fold_name),
        });
    }
    let stats = aggregate_records(&records).map_err(fail(STAGE))?;
    emit_table(&records, &stats, out).map_err(fail(STAGE))?;
    Ok(records)
}

// ------------------------------------------------------------------- run

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub param_hash: String,
    pub stages: Vec<StageReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub log: RunLog,
    pub manifest: PathBuf,
    pub fold_plan: PathBuf,
    pub metrics: PathBuf,
}

impl PipelineSummary {
    pub fn executed(&self) -> usize {
        self.log.stages.iter().filter(|s| s.status == StageStatus::Executed).count()
    }
}

/// Artifact root: explicit value, then the environment variable, then
/// `./artifacts`.
pub fn resolve_artifact_root(configured: Option<&Path>) -> PathBuf {
    configured
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(ARTIFACT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("artifacts"))
}

fn param_hash(cfg: &Config) -> String {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    if let Some(m) = v.as_object_mut() {
        // neither changes any output byte
        m.remove("workers");
        m.remove("artifact_root");
    }
    sha256_hex(v.to_string().as_bytes())
}

pub fn run_pipeline(cfg: &Config) -> Result<PipelineSummary, PipelineError> {
    let root = resolve_artifact_root(cfg.artifact_root.as_deref());
    fs::create_dir_all(&root).map_err(io_fail("run", &root))?;
    let mut stages = Vec::new();

    let cohort_dir = match (&cfg.synth, &cfg.cohort_dir) {
        (Some(s), _) => {
            let spec = SynthSpec {
                n_wsis: s.n_wsis,
                rois_per_wsi: s.rois_per_wsi,
                stain_matrix: s.stain_matrix,
                seed: cfg.seed,
                level0_size: s.level0_size,
                levels: s.levels,
            };
            let digest = stage_digest("synth", &json!(spec));
            let (report, dir) = run_stage(&root, "synth", digest, |out| make_synthetic_cohort(&spec, out).map(|_| ()).map_err(fail("synth")))?;
            stages.push(report);
            dir
        }
        (None, Some(d)) => d.clone(),
        (None, None) => unreachable!("validated config has a cohort source"),
    };

    let cohort_hash = hash_tree(&cohort_dir).map_err(io_fail("ingest", &cohort_dir))?;
    let ingest_digest = stage_digest("ingest", &json!({ "cohort": cohort_hash, "label": cfg.label }));
    let (report, ingest_dir) = run_stage(&root, "ingest", ingest_digest.clone(), |out| {
        write_json("ingest", &out.join("ingest.json"), &ingest_cohort(&cohort_dir, &cfg.label)?)
    })?;
    stages.push(report);
    let ingested = Ingested::load(&ingest_dir.join("ingest.json"), &cohort_dir)?;

    let tile = TileParams {
        size: PatchSize::try_from(cfg.patch_size).map_err(fail("tile"))?,
        negatives_per_wsi: cfg.negatives_per_wsi,
        seed: cfg.seed,
        workers: cfg.workers,
    };
    let tile_digest = stage_digest("tile", &json!({ "ingest": ingest_digest, "params": tile }));
    let (report, mut manifest_dir) = run_stage(&root, "tile", tile_digest.clone(), |out| tile_stage(&ingested, &tile, out).map(|_| ()))?;
    stages.push(report);
    let mut manifest_digest = tile_digest;

    if cfg.augment.enabled {
        let digest = stage_digest("augment", &json!({ "tile": manifest_digest, "margin": cfg.augment.margin }));
        let (report, dir) = run_stage(&root, "augment", digest.clone(), |out| {
            augment_stage(&ingested, &manifest_dir, cfg.augment.margin, cfg.workers, out).map(|_| ())
        })?;
        stages.push(report);
        manifest_dir = dir;
        manifest_digest = digest;
    }

    if cfg.normalization != NormalizationTag::Raw {
        let method = match cfg.normalization {
            NormalizationTag::Vahadane => StainMethod::Vahadane,
            _ => StainMethod::Macenko,
        };
        let (reference_profile, reference_hash) = match &cfg.reference_profile {
            Some(path) => (
                Some(StainProfile::load(path).map_err(fail("normalize"))?),
                Some(hash_file(path).map_err(io_fail("normalize", path))?),
            ),
            None => (None, None),
        };
        let params = NormalizeParams {
            method,
            reference_profile,
            reference_patches: cfg.reference_patches.clone(),
            workers: cfg.workers,
        };
        let digest = stage_digest(
            "normalize",
            &json!({
                "input": manifest_digest,
                "method": method,
                "reference_profile": reference_hash,
                "reference_patches": cfg.reference_patches,
            }),
        );
        let (report, dir) = run_stage(&root, "normalize", digest.clone(), |out| normalize_stage(&manifest_dir, &params, out).map(|_| ()))?;
        stages.push(report);
        manifest_dir = dir;
        manifest_digest = digest;
    }

    let split = SplitParams {
        mode: cfg.split_mode,
        n_test: cfg.n_test,
        n_cv: cfg.n_cv,
        scanner: cfg.scanner,
        seed: cfg.seed,
    };
    let split_digest = stage_digest("split", &json!({ "manifest": manifest_digest, "params": split }));
    let (report, split_dir) = run_stage(&root, "split", split_digest.clone(), |out| {
        let manifest = read_manifest(&manifest_dir.join("manifest.jsonl")).map_err(fail("split"))?;
        split_stage(&ingested.records(), &manifest, &split, out).map(|_| ())
    })?;
    stages.push(report);
    let plan: FoldPlan = read_json("split", &split_dir.join("fold_plan.json"))?;

    let eval = EvalParams {
        pred_dir: cfg.evaluate.pred_dir.clone(),
        threshold: cfg.evaluate.threshold,
        granularity: cfg.evaluate.granularity,
        smooth: cfg.evaluate.smooth,
        workers: cfg.workers,
    };
    let pred_hash = match &eval.pred_dir {
        Some(d) => hash_tree(d).map_err(io_fail("evaluate", d))?,
        None => "baseline".to_string(),
    };
    let eval_digest = stage_digest(
        "evaluate",
        &json!({
            "manifest": manifest_digest,
            "split": split_digest,
            "predictions": pred_hash,
            "threshold": eval.threshold,
            "granularity": eval.granularity,
            "smooth": eval.smooth,
        }),
    );
    let (report, eval_dir) = run_stage(&root, "evaluate", eval_digest.clone(), |out| {
        let names: Vec<String> = plan.runs.iter().map(|r| r.name.clone()).collect();
        let records = evaluate_runs(&manifest_dir, &plan, &names, &eval)?;
        let runs_dir = out.join("runs");
        for rec in &records {
            let one = std::slice::from_ref(rec);
            let stats = aggregate_records(one).map_err(fail("evaluate"))?;
            emit_table(one, &stats, &runs_dir.join(format!("{}.csv", rec.fold_name))).map_err(fail("evaluate"))?;
        }
        Ok(())
    })?;
    stages.push(report);

    let aggregate_digest = stage_digest("aggregate", &json!({ "evaluate": eval_digest }));
    let (report, aggregate_dir) = run_stage(&root, "aggregate", aggregate_digest, |out| {
        let inputs: Vec<PathBuf> = plan.runs.iter().map(|r| eval_dir.join("runs").join(format!("{}.csv", r.name))).collect();
        aggregate_tables(&inputs, &out.join("metrics.csv")).map(|_| ())
    })?;
    stages.push(report);

    let log = RunLog {
        tool: "plaquekit".into(),
        version: VERSION.into(),
        seed: cfg.seed,
        param_hash: param_hash(cfg),
        stages,
    };
    write_json("run", &root.join("run_log.json"), &log)?;
    Ok(PipelineSummary {
        log,
        manifest: manifest_dir.join("manifest.jsonl"),
        fold_plan: split_dir.join("fold_plan.json"),
        metrics: aggregate_dir.join("metrics.csv"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_are_order_independent_and_versioned() {
        let a = stage_digest("tile", &json!({ "a": 1, "b": 2 }));
        let b = stage_digest("tile", &json!({ "b": 2, "a": 1 }));
        assert_eq!(a, b);
        assert_ne!(a, stage_digest("augment", &json!({ "a": 1, "b": 2 })));
    }

    #[test]
    fn tree_hash_tracks_content_not_location() {
        let (x, y) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for d in [x.path(), y.path()] {
            fs::create_dir_all(d.join("sub")).unwrap();
            fs::write(d.join("sub/a.txt"), "alpha").unwrap();
            fs::write(d.join("b.txt"), "beta").unwrap();
            fs::write(d.join(".done"), "ignored").unwrap();
        }
        assert_eq!(hash_tree(x.path()).unwrap(), hash_tree(y.path()).unwrap());
        fs::write(y.path().join("b.txt"), "beta!").unwrap();
        assert_ne!(hash_tree(x.path()).unwrap(), hash_tree(y.path()).unwrap());
    }

    #[test]
    fn completed_stage_is_skipped() {
        let root = tempfile::tempdir().unwrap();
        let digest = stage_digest("demo", &json!(1));
        let mut calls = 0;
        let (r1, dir) = run_stage(root.path(), "tile", digest.clone(), |out| {
            calls += 1;
            fs::write(out.join("x"), "1").map_err(fail("tile"))
        })
        .unwrap();
        assert_eq!(r1.status, StageStatus::Executed);
        assert_eq!(fs::read_to_string(dir.join("x")).unwrap(), "1");
        let (r2, _) = run_stage(root.path(), "tile", digest, |_| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(r2.status, StageStatus::Skipped);
        assert_eq!(calls, 1);
    }

    #[test]
    fn failed_stage_leaves_no_done_marker() {
        let root = tempfile::tempdir().unwrap();
        let digest = stage_digest("demo", &json!(2));
        let err = run_stage(root.path(), "tile", digest.clone(), |_| Err(fail("tile")("boom"))).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(!root.path().join("tile").join(&digest[..16]).exists());
    }
}
