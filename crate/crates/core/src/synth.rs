//! Deterministic synthetic cohort: two-stain Beer–Lambert "tissue" pyramids
//! with planted star-shaped plaques and their annotation files.
//!
//! Layout written under `out_dir`:
//!
//! ```text
//! cohort.json            generator bookkeeping (areas, stain columns)
//! <wsi_id>.meta          sidecar
//! <wsi_id>.xml           annotations
//! <wsi_id>/level_k.png   pyramid levels
//! ```

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{bounding_box, point_in_polygon, write_annotation_file, Point, PolygonRoi};
use crate::stain::{render_concentrations, DEFAULT_IO};
use crate::wsi::{build_pyramid, Scanner, Slide, WsiRecord};

pub const DEFAULT_STAIN_MATRIX: [[f64; 3]; 2] = [[0.65, 0.70, 0.29], [0.27, 0.57, 0.78]];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("io error on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("invalid synthetic cohort spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_wsis: usize,
    pub rois_per_wsi: usize,
    /// Hematoxylin and DAB OD vectors; normalized before use.
    #[serde(default = "default_stains")]
    pub stain_matrix: [[f64; 3]; 2],
    pub seed: u64,
    #[serde(default = "default_size")]
    pub level0_size: u32,
    #[serde(default = "default_levels")]
    pub levels: usize,
}

fn default_stains() -> [[f64; 3]; 2] {
    DEFAULT_STAIN_MATRIX
}
fn default_size() -> u32 {
    1024
}
fn default_levels() -> usize {
    3
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_wsis: 8,
            rois_per_wsi: 6,
            stain_matrix: DEFAULT_STAIN_MATRIX,
            seed: 0,
            level0_size: default_size(),
            levels: default_levels(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRoi {
    pub roi_id: String,
    /// Area from the polar construction, independent of the shoelace sum.
    pub area: f64,
    pub center: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWsi {
    pub record: WsiRecord,
    pub stain_columns: [[f64; 3]; 2],
    pub rois: Vec<PlantedRoi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCohort {
    pub spec: SynthSpec,
    pub wsis: Vec<SynthWsi>,
}

impl SynthCohort {
    pub fn load(dir: &Path) -> Result<Self, SynthError> {
        let path = dir.join("cohort.json");
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(&path, e))
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

/// The second scanner renders hematoxylin with a slightly bluer hue.
fn scanner_columns(base: [[f64; 3]; 2], scanner: Scanner) -> [[f64; 3]; 2] {
    let h = unit(base[0]);
    let d = unit(base[1]);
    match scanner {
        Scanner::NanoZoomer2RS => [h, d],
        Scanner::NanoZoomerS60 => {
            let shifted: [f64; 3] = std::array::from_fn(|k| 0.9 * h[k] + 0.1 * [0.55, 0.75, 0.38][k]);
            [unit(shifted), d]
        }
    }
}

struct Star {
    roi: PolygonRoi,
    area: f64,
    center: (f64, f64),
}

fn star(rng: &mut ChaCha8Rng, id: String, wsi_id: &str, c: (f64, f64), radius: (f64, f64)) -> Star {
    let n = rng.random_range(7..14);
    let polar: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let theta = TAU * (k as f64 + rng.random_range(0.0..0.7)) / n as f64;
            (theta, rng.random_range(radius.0..radius.1))
        })
        .collect();
    let area = (0..n)
        .map(|k| {
            let (t0, r0) = polar[k];
            let (t1, r1) = polar[(k + 1) % n];
            let dt = if k + 1 == n { t1 + TAU - t0 } else { t1 - t0 };
            0.5 * r0 * r1 * dt.sin()
        })
        .sum();
    let vertices = polar.iter().map(|&(t, r)| Point::new(c.0 + r * t.cos(), c.1 + r * t.sin())).collect();
    let mut roi = PolygonRoi::new(id, wsi_id, vertices);
    roi.canonicalize();
    Star { roi, area, center: c }
}

fn place_stars(rng: &mut ChaCha8Rng, wsi_id: &str, count: usize, size: u32) -> Vec<Star> {
    let (r_min, r_max) = (22.0, 44.0);
    let margin = r_max + 4.0;
    let mut stars: Vec<Star> = Vec::with_capacity(count);
    let mut attempts = 0;
    while stars.len() < count && attempts < 10_000 {
        attempts += 1;
        let c = (rng.random_range(margin..size as f64 - margin), rng.random_range(margin..size as f64 - margin));
        if stars.iter().any(|s| (s.center.0 - c.0).hypot(s.center.1 - c.1) < 2.5 * r_max) {
            continue;
        }
        stars.push(star(rng, format!("roi_{:03}", stars.len()), wsi_id, c, (r_min, r_max)));
    }
    stars
}

/// Smooth field in [0, 1] from a few random plane waves.
fn smooth_field(rng: &mut ChaCha8Rng, size: u32) -> impl Fn(f64, f64) -> f64 {
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let theta = rng.random_range(0.0..TAU);
            let freq = rng.random_range(1.0..3.0) * TAU / size as f64;
            (freq * theta.cos(), freq * theta.sin(), rng.random_range(0.0..TAU))
        })
        .collect();
    move |x, y| {
        let s: f64 = waves.iter().map(|&(fx, fy, p)| (fx * x + fy * y + p).sin()).sum();
        0.5 + s / (2.0 * waves.len() as f64)
    }
}

fn render_level0(rng: &mut ChaCha8Rng, size: u32, stars: &[Star], columns: &[[f64; 3]; 2]) -> RgbImage {
    let n = size as usize;
    let field = smooth_field(rng, size);
    let mut conc = vec![[0.0f64; 2]; n * n];
    for y in 0..n {
        for x in 0..n {
            let f = field(x as f64 + 0.5, y as f64 + 0.5);
            // background glass where the field is low
            if f > 0.25 {
                conc[y * n + x][0] = 0.12 + 0.35 * f;
            }
        }
    }
    // nuclei: small pure-hematoxylin disks
    for _ in 0..(n * n / 2500) {
        let (cx, cy) = (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64));
        let r: f64 = rng.random_range(2.5..5.0);
        let strength = rng.random_range(0.9..1.4);
        let (x0, x1) = (((cx - r).floor().max(0.0)) as usize, ((cx + r).ceil() as usize).min(n));
        let (y0, y1) = (((cy - r).floor().max(0.0)) as usize, ((cy + r).ceil() as usize).min(n));
        for y in y0..y1 {
            for x in x0..x1 {
                if (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) <= r {
                    conc[y * n + x] = [strength, 0.0];
                }
            }
        }
    }
    // plaques: DAB inside the planted polygon, fading toward the rim
    for s in stars {
        let bb = bounding_box(&s.roi.vertices);
        let strength = rng.random_range(0.7..1.2);
        for y in (bb.min_y.floor().max(0.0) as usize)..(bb.max_y.ceil() as usize).min(n) {
            for x in (bb.min_x.floor().max(0.0) as usize)..(bb.max_x.ceil() as usize).min(n) {
                let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
                if point_in_polygon(p, &s.roi.vertices) {
                    let d = (p.x - s.center.0).hypot(p.y - s.center.1) / 44.0;
                    let c = &mut conc[y * n + x];
                    c[1] = strength * (1.0 - 0.4 * d.min(1.0));
                    c[0] *= if d < 0.6 { 0.0 } else { 0.3 };
                }
            }
        }
    }
    for c in conc.iter_mut() {
        let jitter = rng.random_range(0.92..1.08);
        *c = c.map(|v| v * jitter);
    }
    render_concentrations(columns, &conc, size, size, DEFAULT_IO)
}

fn generate_one(spec: &SynthSpec, index: usize, out_dir: &Path) -> Result<SynthWsi, SynthError> {
    let wsi_id = format!("wsi_{index:02}");
    let scanner = if index < spec.n_wsis.div_ceil(2) {
        Scanner::NanoZoomer2RS
    } else {
        Scanner::NanoZoomerS60
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64));
    let columns = scanner_columns(spec.stain_matrix, scanner);
    let stars = place_stars(&mut rng, &wsi_id, spec.rois_per_wsi, spec.level0_size);
    let pyramid = build_pyramid(render_level0(&mut rng, spec.level0_size, &stars, &columns), spec.levels);
    let record = WsiRecord {
        wsi_id: wsi_id.clone(),
        image_path: wsi_id.clone().into(),
        scanner,
        resolution_nm_per_px: scanner.nominal_resolution_nm(),
        base_magnification: 40.0,
        level_count: pyramid.len(),
        level_dimensions: pyramid.iter().map(|l| l.dimensions()).collect(),
    };

    let slide_dir = out_dir.join(&wsi_id);
    fs::create_dir_all(&slide_dir).map_err(|e| io_err(&slide_dir, e))?;
    for (k, level) in pyramid.iter().enumerate() {
        let path = Slide::level_path(&slide_dir, k);
        level.save(&path).map_err(|e| io_err(&path, e))?;
    }
    let meta = out_dir.join(format!("{wsi_id}.meta"));
    fs::write(&meta, record.to_sidecar()).map_err(|e| io_err(&meta, e))?;
    let rois: Vec<PolygonRoi> = stars.iter().map(|s| s.roi.clone()).collect();
    let xml = out_dir.join(format!("{wsi_id}.xml"));
    fs::write(&xml, write_annotation_file(&wsi_id, &rois)).map_err(|e| io_err(&xml, e))?;

    Ok(SynthWsi {
        record,
        stain_columns: columns,
        rois: stars
            .iter()
            .map(|s| PlantedRoi {
                roi_id: s.roi.roi_id.clone(),
                area: s.area,
                center: s.center,
            })
            .collect(),
    })
}

pub fn make_synthetic_cohort(spec: &SynthSpec, out_dir: &Path) -> Result<SynthCohort, SynthError> {
    if spec.n_wsis == 0 {
        return Err(SynthError::InvalidSpec("n_wsis must be positive".into()));
    }
    if spec.levels == 0 || spec.level0_size >> (spec.levels - 1) < 64 {
        return Err(SynthError::InvalidSpec(format!(
            "{} levels of a {} px slide leave a top level under 64 px",
            spec.levels, spec.level0_size
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let wsis = (0..spec.n_wsis)
        .into_par_iter()
        .map(|i| generate_one(spec, i, out_dir))
        .collect::<Result<Vec<_>, _>>()?;
    let cohort = SynthCohort { spec: spec.clone(), wsis };
    let path = out_dir.join("cohort.json");
    let json = serde_json::to_string_pretty(&cohort).expect("cohort serializes") + "\n";
    fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    Ok(cohort)
}
