//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use plaquekit::annotations::{polygon_area, Point, PolygonRoi};
use plaquekit::augmentation::{augment_samples, seed_mask, Corner};
use plaquekit::folds::{
    build_fold_plan, build_scanner_plan, materialize_run, verify_assignments, verify_plan, FoldPlan, RunDataset,
};
use plaquekit::mask::BinaryMask;
use plaquekit::metrics::{aggregate_records, confusion_counts, read_table, segmentation_scores, COLUMNS};
use plaquekit::pipeline::{augment_stage, hash_tree, ingest_cohort, tile_stage, Ingested, TileParams};
use plaquekit::stain::{
    angle_deg, estimate_stains_macenko, estimate_stains_vahadane, is_non_increasing, normalize_to_reference, render_concentrations,
    MacenkoParams, StainProfile, VahadaneParams, DEFAULT_IO,
};
use plaquekit::synth::{make_synthetic_cohort, SynthSpec};
use plaquekit::tiling::{
    context_ratio, rasterize_mask, sample_patches, AugmentationTag, ManifestRecord, PatchSize, PatchSpec, SamplingOptions,
    WORKING_MAGNIFICATION,
};
use plaquekit::wsi::{Scanner, Slide, WsiRecord};

type Outcome = Result<String, String>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

const TABLES: [&str; 6] = ["unet_128", "attention_unet_128", "unet_256", "attention_unet_256", "unet_128_2rs", "unet_128_s60"];

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    if took < limit {
        Ok(took)
    } else {
        Err(format!("took {took:?}, limit {limit:?}"))
    }
}

// ------------------------------------------------------------ aggregation

fn aggregation_oracle() -> Outcome {
    let start = Instant::now();
    let mut cells = 0;
    for name in TABLES {
        let table = read_table(&fixtures().join(format!("{name}.csv"))).map_err(|e| format!("{name}: {e}"))?;
        let expected = table.stats.ok_or(format!("{name}: no summary rows"))?;
        let computed = aggregate_records(&table.records).map_err(|e| format!("{name}: {e}"))?;
        for col in COLUMNS {
            let Some(p) = expected.get(col) else { continue };
            let c = computed.get(col).ok_or(format!("{name}: {col} not aggregated"))?;
            for (stat, want, got) in [("mean", p.mean, c.mean), ("std", p.std, c.std), ("max", p.max, c.max), ("min", p.min, c.min)] {
                if (want - got).abs() > 5e-4 {
                    return Err(format!("{name} {col} {stat}: expected {want}, computed {got}"));
                }
                cells += 1;
            }
        }
    }
    let took = within(Duration::from_secs(1), start)?;
    Ok(format!("{cells} cells over {} tables within 5e-4 in {took:?}", TABLES.len()))
}

// ---------------------------------------------------------------- metrics

fn metrics_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut empties = 0;
    for i in 0..1000 {
        let (pp, pg) = match i % 10 {
            0 => (0.0, 0.0),
            1 => (0.0, rng.random_range(0.0..0.5)),
            2 => (rng.random_range(0.0..0.5), 0.0),
            _ => (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
        };
        let pred = BinaryMask::from_fn(64, 64, |_, _| rng.random_bool(pp));
        let gt = BinaryMask::from_fn(64, 64, |_, _| rng.random_bool(pg));
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for y in 0..64 {
            for x in 0..64 {
                match (pred.get(x, y), gt.get(x, y)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
        }
        let c = confusion_counts(&pred, &gt).map_err(|e| e.to_string())?;
        if (c.tp, c.fp, c.fn_, c.tn) != (tp, fp, fn_, tn) {
            return Err(format!("pair {i}: counts {c:?} vs oracle {:?}", (tp, fp, fn_, tn)));
        }
        let s = segmentation_scores(&c, 0.0);
        let (want_dice, want_p, want_r) = if tp + fp + fn_ == 0 {
            empties += 1;
            (1.0, 1.0, 1.0)
        } else {
            let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            (div(2 * tp, 2 * tp + fp + fn_), div(tp, tp + fp), div(tp, tp + fn_))
        };
        if s.dice != want_dice || s.precision != want_p || s.recall != want_r {
            return Err(format!("pair {i}: scores {s:?} vs oracle dice {want_dice} p {want_p} r {want_r}"));
        }
        if (s.dice - s.f1).abs() > 1e-12 {
            return Err(format!("pair {i}: dice {} f1 {}", s.dice, s.f1));
        }
    }
    let took = within(Duration::from_secs(10), start)?;
    Ok(format!("1000 pairs exact ({empties} empty-vs-empty), dice == f1, {took:?}"))
}

// ------------------------------------------------------------------ stain

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

/// Random stain pair near hematoxylin/DAB, then a mixed-tissue image.
fn random_stain_image(seed: u64) -> ([[f64; 3]; 2], RgbImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |v: [f64; 3]| unit(v.map(|x: f64| (x + rng.random_range(-0.08..0.08)).max(0.02)));
    let cols = [jitter([0.65, 0.70, 0.29]), jitter([0.27, 0.57, 0.78])];
    let scale = rng.random_range(0.6..1.4);
    let conc: Vec<[f64; 2]> = (0..128 * 128)
        .map(|_| {
            let r: f64 = rng.random();
            let c = if r < 0.3 {
                [rng.random_range(0.3..1.2), 0.0]
            } else if r < 0.5 {
                [0.0, rng.random_range(0.3..1.2)]
            } else if r < 0.9 {
                [rng.random_range(0.05..0.9), rng.random_range(0.05..0.9)]
            } else {
                [0.0, 0.0]
            };
            c.map(|v| v * scale)
        })
        .collect();
    (cols, render_concentrations(&cols, &conc, 128, 128, DEFAULT_IO))
}

fn column_error(p: &StainProfile, truth: &[[f64; 3]; 2]) -> f64 {
    let (a, b) = (p.column(0), p.column(1));
    let direct = angle_deg(&a, &truth[0]).max(angle_deg(&b, &truth[1]));
    let swapped = angle_deg(&a, &truth[1]).max(angle_deg(&b, &truth[0]));
    direct.min(swapped)
}

fn stain_recovery() -> Outcome {
    let start = Instant::now();
    let mut within_2deg = 0;
    let mut worst_angle: f64 = 0.0;
    let mut worst_residual: f64 = 0.0;
    let vahadane = VahadaneParams {
        sparsity_lambda: 0.0,
        ..Default::default()
    };
    for seed in 0..50 {
        let (truth, img) = random_stain_image(1000 + seed);
        let m = estimate_stains_macenko(&img, &MacenkoParams::default()).map_err(|e| format!("image {seed}: {e}"))?;
        let err = column_error(&m, &truth);
        worst_angle = worst_angle.max(err);
        if err <= 2.0 {
            within_2deg += 1;
        }
        let v = estimate_stains_vahadane(&img, &vahadane).map_err(|e| format!("image {seed}: {e}"))?;
        worst_residual = worst_residual.max(v.relative_residual);
        if v.relative_residual >= 0.02 {
            return Err(format!("image {seed}: sparse fit residual {:.4}", v.relative_residual));
        }
        if !is_non_increasing(&v.objective_trace) {
            return Err(format!("image {seed}: objective increased {:?}", v.objective_trace));
        }
    }
    let took = within(Duration::from_secs(120), start)?;
    if within_2deg < 48 {
        return Err(format!("only {within_2deg}/50 within 2 degrees (worst {worst_angle:.2})"));
    }
    Ok(format!(
        "angle <= 2 deg in {within_2deg}/50 (worst {worst_angle:.3}), residual max {:.4}%, objective monotone, {took:?}",
        100.0 * worst_residual
    ))
}

fn normalization_fixed_points() -> Outcome {
    let mut worst = 0u8;
    let mut whites = 0;
    for seed in 0..10 {
        let (_, mut img) = random_stain_image(2000 + seed);
        for x in 0..128 {
            img.put_pixel(x, 0, image::Rgb([255, 255, 255]));
        }
        let profiles = [
            estimate_stains_macenko(&img, &MacenkoParams::default()).map_err(|e| e.to_string())?,
            estimate_stains_vahadane(&img, &VahadaneParams::default()).map_err(|e| e.to_string())?.profile,
        ];
        for p in &profiles {
            let out = normalize_to_reference(&img, p, p).map_err(|e| e.to_string())?;
            for (a, b) in img.pixels().zip(out.pixels()) {
                for k in 0..3 {
                    worst = worst.max(a[k].abs_diff(b[k]));
                }
                if a.0 == [255, 255, 255] {
                    whites += 1;
                    if b.0.iter().any(|&c| c < 253) {
                        return Err(format!("white pixel became {:?} under {:?}", b.0, p.method));
                    }
                }
            }
        }
    }
    if worst > 2 {
        return Err(format!("identity transfer moved a channel by {worst} levels"));
    }
    Ok(format!("max channel change {worst} over 20 identity transfers, {whites} white pixels kept"))
}

// ----------------------------------------------------- cohort-backed checks

struct Cohort {
    _dir: tempfile::TempDir,
    ingested: Ingested,
    /// Manifest with base patches and corner variants.
    manifest: Vec<ManifestRecord>,
}

fn build_cohort() -> Result<Cohort, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cohort_dir = dir.path().join("cohort");
    make_synthetic_cohort(
        &SynthSpec {
            seed: 5,
            ..Default::default()
        },
        &cohort_dir,
    )
    .map_err(|e| e.to_string())?;
    let ingested = ingest_cohort(&cohort_dir, plaquekit::annotations::DEFAULT_LABEL).map_err(|e| e.to_string())?;
    let tile_dir = dir.path().join("tile");
    let aug_dir = dir.path().join("augment");
    std::fs::create_dir_all(&tile_dir).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&aug_dir).map_err(|e| e.to_string())?;
    let params = TileParams {
        size: PatchSize::S128,
        negatives_per_wsi: 0,
        seed: 5,
        workers: 4,
    };
    tile_stage(&ingested, &params, &tile_dir).map_err(|e| e.to_string())?;
    let manifest = augment_stage(&ingested, &tile_dir, 0, 4, &aug_dir).map_err(|e| e.to_string())?;
    Ok(Cohort {
        _dir: dir,
        ingested,
        manifest,
    })
}

fn augmentation_contract(cohort: &Cohort) -> Outcome {
    let mut objects = 0;
    let mut kept = 0;
    let mut dropped_total = 0;
    for size in [PatchSize::S128, PatchSize::S256] {
        for s in &cohort.ingested.slides {
            let slide = Slide::open(s.record.clone(), &cohort.ingested.cohort_dir).map_err(|e| e.to_string())?;
            let level = s.record.nearest_level(WORKING_MAGNIFICATION);
            let options = SamplingOptions {
                workers: 2,
                negatives_per_wsi: 0,
                seed: 1,
            };
            let base = sample_patches(&slide, &s.rois, size, level, &options).map_err(|e| e.to_string())?.samples;
            let outcome = augment_samples(&base, &slide, &s.rois, 0, 2).map_err(|e| e.to_string())?;
            dropped_total += outcome.dropped.len();
            for b in base.iter().filter(|b| b.spec.seed_roi.is_some()) {
                objects += 1;
                let id = b.patch_id();
                let variants: Vec<_> = outcome.variants.iter().filter(|v| v.spec.seed_roi == b.spec.seed_roi).collect();
                let dropped: BTreeSet<Corner> = outcome.dropped.iter().filter(|d| d.patch_id == id).map(|d| d.corner).collect();
                if variants.len() + dropped.len() != 4 {
                    return Err(format!("{id}: {} variants + {} logged drops", variants.len(), dropped.len()));
                }
                kept += variants.len();
                let want = seed_mask(b, &slide, &s.rois).map_err(|e| e.to_string())?.count_ones();
                let px = size.px();
                for v in variants {
                    let m = seed_mask(v, &slide, &s.rois).map_err(|e| e.to_string())?;
                    if m.count_ones() != want {
                        return Err(format!("{id} {:?}: seed count {} vs {want}", v.augmentation_tag, m.count_ones()));
                    }
                    let (x0, y0, x1, y1) = m.foreground_bbox().ok_or(format!("{id}: empty seed mask"))?;
                    let flush = match v.augmentation_tag {
                        AugmentationTag::CornerTL => x0 == 0 && y0 == 0,
                        AugmentationTag::CornerTR => x1 == px && y0 == 0,
                        AugmentationTag::CornerBL => x0 == 0 && y1 == px,
                        AugmentationTag::CornerBR => x1 == px && y1 == px,
                        AugmentationTag::None => false,
                    };
                    if !flush {
                        return Err(format!("{id} {:?}: bbox {:?} not flush", v.augmentation_tag, (x0, y0, x1, y1)));
                    }
                }
            }
        }
    }
    if kept == 0 {
        return Err("no variant survived".into());
    }
    Ok(format!("{objects} object patches at 128/256: {kept} variants + {dropped_total} logged drops, counts equal, bboxes flush"))
}

fn wsi_records(cohort: &Cohort) -> Vec<WsiRecord> {
    cohort.ingested.records()
}

fn names(plan: &FoldPlan) -> Vec<String> {
    plan.runs.iter().map(|r| r.name.clone()).collect()
}

fn fixture_names(table: &str) -> Result<Vec<String>, String> {
    let t = read_table(&fixtures().join(format!("{table}.csv"))).map_err(|e| e.to_string())?;
    Ok(t.records.into_iter().map(|r| r.fold_name).collect())
}

type Fault = (&'static str, Box<dyn Fn(&mut FoldPlan, &mut Vec<ManifestRecord>, &mut Vec<RunDataset>)>);

fn planted_faults(manifest: &[ManifestRecord]) -> Vec<Fault> {
    let aug_id = manifest.iter().find(|r| r.augmentation_tag != AugmentationTag::None).map(|r| r.patch_id.clone()).unwrap();
    vec![
        ("test slide also in train", Box::new(|p, _, _| {
            let w = p.runs[0].test[0].clone();
            p.runs[0].train.push(w);
        })),
        ("val slide also in train", Box::new(|p, _, _| {
            let w = p.runs[3].val[0].clone();
            p.runs[3].train.push(w);
        })),
        ("test slide also in val", Box::new(|p, _, _| {
            let w = p.runs[5].test[1].clone();
            p.runs[5].val.push(w);
        })),
        ("test slide moved to train", Box::new(|p, _, _| {
            let w = p.runs[7].test.remove(0);
            p.runs[7].train.push(w);
        })),
        ("slide dropped from one run", Box::new(|p, _, _| {
            p.runs[2].train.pop();
        })),
        ("slide dropped from every run", Box::new(|p, _, _| {
            let w = p.runs[0].train[0].clone();
            for r in &mut p.runs {
                r.train.retain(|x| x != &w);
                r.val.retain(|x| x != &w);
                r.test.retain(|x| x != &w);
            }
        })),
        ("unknown slide in train", Box::new(|p, _, _| p.runs[4].train.push("wsi_99".into()))),
        ("malformed run name", Box::new(|p, _, _| p.runs[1].name = "fold_1".into())),
        ("duplicate run name", Box::new(|p, _, _| p.runs[2].name = p.runs[1].name.clone())),
        ("outer fold repeats another's test set", Box::new(|p, _, _| {
            let (a, b) = (p.runs[0].test.clone(), p.runs[3].test.clone());
            for r in p.runs.iter_mut().skip(3).take(3) {
                r.test = a.clone();
                r.train.retain(|w| !a.contains(w));
                r.val.retain(|w| !a.contains(w));
                r.train.extend(b.iter().cloned());
            }
        })),
        ("duplicate patch id in manifest", Box::new(|_, m, _| {
            let r = m[0].clone();
            m.push(r);
        })),
        ("patch from a slide outside the plan", Box::new(|_, m, _| {
            let mut r = m[0].clone();
            r.patch_id = "wsi_99__roi_000__128".into();
            r.wsi_id = "wsi_99".into();
            m.push(r);
        })),
        ("val patch placed in train", Box::new(|_, _, d| {
            let id = d[0].val[0].clone();
            d[0].train.push(id.clone());
            d[0].val.retain(|x| x != &id);
        })),
        ("test patch placed in train", Box::new(|_, _, d| {
            let id = d[6].test[0].clone();
            d[6].train.push(id.clone());
            d[6].test.retain(|x| x != &id);
        })),
        ("train patch placed in test", Box::new(|_, _, d| {
            let id = d[9].train[0].clone();
            d[9].test.push(id.clone());
            d[9].train.retain(|x| x != &id);
        })),
        ("patch in two splits", Box::new(|_, _, d| {
            let id = d[1].test[0].clone();
            d[1].val.push(id);
        })),
        ("augmented variant in validation", Box::new(move |p, _, d| {
            let run = p.runs.iter().position(|r| r.val.iter().any(|w| aug_id.starts_with(&format!("{w}__")))).unwrap();
            d[run].val.push(aug_id.clone());
        })),
        ("unknown patch id in a run", Box::new(|_, _, d| d[4].train.push("nope__roi_000__128".into()))),
        ("run without patch assignment", Box::new(|_, _, d| {
            d.remove(8);
        })),
        ("assignment for a run not in the plan", Box::new(|_, _, d| {
            let mut extra = d[0].clone();
            extra.run = "test_09_cv_09".into();
            d.push(extra);
        })),
    ]
}

fn fold_plan_checks(cohort: &Cohort) -> Outcome {
    let wsis = wsi_records(cohort);
    let plan = build_fold_plan(&wsis, 4, 3, 17).map_err(|e| e.to_string())?;
    let want = fixture_names("unet_128")?;
    if names(&plan) != want {
        return Err(format!("nested names {:?} vs expected {want:?}", names(&plan)));
    }
    for (scanner, table) in [(Scanner::NanoZoomer2RS, "unet_128_2rs"), (Scanner::NanoZoomerS60, "unet_128_s60")] {
        let sp = build_scanner_plan(&wsis, scanner, 4, 17).map_err(|e| e.to_string())?;
        let want = fixture_names(table)?;
        if names(&sp) != want {
            return Err(format!("{scanner} names {:?} vs expected {want:?}", names(&sp)));
        }
        if !verify_plan(&sp, &cohort.manifest).is_empty() {
            return Err(format!("clean {scanner} plan reported violations"));
        }
    }
    let clean = verify_plan(&plan, &cohort.manifest);
    if !clean.is_empty() {
        return Err(format!("clean plan reported {}: {}", clean.len(), clean[0]));
    }
    let faults = planted_faults(&cohort.manifest);
    let mut missed = Vec::new();
    for (name, plant) in &faults {
        let mut p = plan.clone();
        let mut m = cohort.manifest.clone();
        let mut d: Vec<RunDataset> = p.runs.iter().map(|r| materialize_run(r, &m)).collect();
        plant(&mut p, &mut m, &mut d);
        // plan and manifest faults go through the full check; hand-edited
        // assignments are checked as given
        let mut found = verify_plan(&p, &m);
        found.extend(verify_assignments(&p, &m, &d));
        if found.is_empty() {
            missed.push(*name);
        }
    }
    if !missed.is_empty() {
        return Err(format!("missed {}/{}: {missed:?}", missed.len(), faults.len()));
    }
    Ok(format!("12 nested + 2x4 scanner names match, {}/{} planted faults detected", faults.len(), faults.len()))
}

// --------------------------------------------------------------- geometry

fn geometry() -> Outcome {
    let record = |w0: u32| WsiRecord {
        wsi_id: "g".into(),
        image_path: "g".into(),
        scanner: Scanner::NanoZoomer2RS,
        resolution_nm_per_px: 227.0,
        base_magnification: 40.0,
        level_count: 2,
        level_dimensions: vec![(w0, w0), (w0 / 2, w0 / 2)],
    };
    let spec = |origin: (i64, i64), size: PatchSize, level: usize| PatchSpec {
        wsi_id: "g".into(),
        origin,
        size,
        working_level: level,
        source_rois: vec![],
        seed_roi: None,
    };
    let rect = |x0: f64, y0: f64, x1: f64, y1: f64| {
        PolygonRoi::new("r", "g", vec![Point::new(x0, y0), Point::new(x1, y0), Point::new(x1, y1), Point::new(x0, y1)])
    };
    let wsi = record(4096);
    let full = rasterize_mask(&[rect(0.0, 0.0, 4096.0, 4096.0)], &spec((512, 512), PatchSize::S256, 1), &wsi).map_err(|e| e.to_string())?;
    let quarter = rasterize_mask(&[rect(64.0, 64.0, 192.0, 192.0)], &spec((0, 0), PatchSize::S256, 0), &wsi).map_err(|e| e.to_string())?;
    let quarter_l1 = rasterize_mask(&[rect(128.0, 128.0, 384.0, 384.0)], &spec((0, 0), PatchSize::S256, 1), &wsi).map_err(|e| e.to_string())?;
    for (what, got, want) in [("full", context_ratio(&full), 1.0), ("quarter", context_ratio(&quarter), 0.25), ("quarter l1", context_ratio(&quarter_l1), 0.25)] {
        if got != want {
            return Err(format!("context_ratio {what}: {got} != {want}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 1000 {
        let level = rng.random_range(0..2usize);
        let ds = (1u32 << level) as f64;
        let extent = 256.0 * ds;
        let n = rng.random_range(3..12);
        let c = (extent / 2.0, extent / 2.0);
        let pts: Vec<Point> = (0..n)
            .map(|k| {
                let t = std::f64::consts::TAU * (k as f64 + rng.random_range(0.0..0.8)) / n as f64;
                let r = rng.random_range(0.1..0.48) * extent;
                Point::new(c.0 + r * t.cos(), c.1 + r * t.sin())
            })
            .collect();
        let mut roi = PolygonRoi::new("s", "g", pts);
        roi.canonicalize();
        let Ok(area) = polygon_area(&roi) else { continue };
        let area_px = area / (ds * ds);
        if area_px < 500.0 {
            continue;
        }
        let count = rasterize_mask(&[roi], &spec((0, 0), PatchSize::S256, level), &wsi).map_err(|e| e.to_string())?.count_ones() as f64;
        let rel = (count - area_px).abs() / area_px;
        worst = worst.max(rel);
        if rel >= 0.02 {
            return Err(format!("area {area_px:.1} px^2, count {count}, rel {rel:.4}"));
        }
        checked += 1;
    }
    Ok(format!("context ratios exact, {checked} polygons within 2% (worst {:.3}%)", 100.0 * worst))
}

// ----------------------------------------------------------- end to end

fn end_to_end_determinism() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("pipeline.toml");
    std::fs::write(
        &config,
        "seed = 3\n[synth]\nn_wsis = 8\nrois_per_wsi = 6\n[tile]\nsize = 128\nworkers = 4\n[augment]\nenabled = true\n\
         [normalize]\nmethod = \"macenko\"\n[split]\nmode = \"nested\"\n",
    )
    .map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    for k in 0..2 {
        let root = dir.path().join(format!("run{k}"));
        let out = Command::new(env!("CARGO_BIN_EXE_plaquekit"))
            .args(["run", "--config"])
            .arg(&config)
            .arg("--artifact-root")
            .arg(&root)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("run {k} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
        }
        let metrics = PathBuf::from(String::from_utf8_lossy(&out.stdout).trim());
        let manifest = std::fs::read_dir(root.join("normalize")).map_err(|e| e.to_string())?.count();
        if manifest != 1 || !metrics.is_file() {
            return Err(format!("run {k}: unexpected artifact layout"));
        }
        let plan = std::fs::read_dir(root.join("split")).map_err(|e| e.to_string())?.next().unwrap().map_err(|e| e.to_string())?.path();
        let plan: FoldPlan = serde_json::from_str(&std::fs::read_to_string(plan.join("fold_plan.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        if plan.runs.len() != 12 {
            return Err(format!("run {k}: {} runs", plan.runs.len()));
        }
        trees.push(hash_tree(&root).map_err(|e| e.to_string())?);
    }
    if trees[0] != trees[1] {
        return Err("artifact trees differ between runs".into());
    }
    let took = within(Duration::from_secs(300), start)?;
    Ok(format!("two runs byte-identical (tree {}), {took:?}", &trees[0][..16]))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(detail) => {
            failed += 1;
            println!("FAIL {name}: {detail}");
        }
    };
    report("aggregation oracle", aggregation_oracle());
    report("metrics oracle", metrics_oracle());
    report("stain recovery", stain_recovery());
    report("normalization fixed points", normalization_fixed_points());
    match build_cohort() {
        Ok(cohort) => {
            report("augmentation contract", augmentation_contract(&cohort));
            report("fold plan", fold_plan_checks(&cohort));
        }
        Err(e) => {
            report("augmentation contract", Err(format!("cohort: {e}")));
            report("fold plan", Err(format!("cohort: {e}")));
        }
    }
    report("geometry", geometry());
    report("end-to-end determinism", end_to_end_determinism());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
