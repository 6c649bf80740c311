//! Whole-slide image metadata, the key-value sidecar format, and pyramid
//! region access.
//!
//! A slide on disk is a directory holding one PNG per pyramid level
//! (`level_0.png`, `level_1.png`, ...) next to a `<wsi_id>.meta` sidecar.
//! Level 0 is the full-resolution scan; every coordinate persisted by this
//! crate is expressed in level-0 pixels.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WsiError {
    #[error("invalid slide record {wsi_id}: {reason}")]
    InvalidRecord { wsi_id: String, reason: String },
    #[error("sidecar line {line}: {reason}")]
    Sidecar { line: usize, reason: String },
    #[error("slide {wsi_id} has no level {level}")]
    UnknownLevel { wsi_id: String, level: usize },
    #[error("region ({x}, {y}) size {size} outside level {level} of {wsi_id} ({width}x{height})")]
    OutOfBounds {
        wsi_id: String,
        level: usize,
        x: i64,
        y: i64,
        size: u32,
        width: u32,
        height: u32,
    },
    #[error("cannot read level {level} of {wsi_id}: {reason}")]
    UnreadableImage {
        wsi_id: String,
        level: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scanner {
    NanoZoomer2RS,
    NanoZoomerS60,
}

impl Scanner {
    pub const ALL: [Scanner; 2] = [Scanner::NanoZoomer2RS, Scanner::NanoZoomerS60];

    /// Level-0 sampling pitch of the scanner in nm per pixel.
    pub fn nominal_resolution_nm(self) -> f64 {
        match self {
            Scanner::NanoZoomer2RS => 227.0,
            Scanner::NanoZoomerS60 => 221.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scanner::NanoZoomer2RS => "NanoZoomer2RS",
            Scanner::NanoZoomerS60 => "NanoZoomerS60",
        }
    }
}

impl fmt::Display for Scanner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scanner {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace(['-', '_', ' ', '.'], "").as_str() {
            "nanozoomer2rs" | "nanozoomer20rs" | "2rs" | "20rs" => Ok(Scanner::NanoZoomer2RS),
            "nanozoomers60" | "s60" => Ok(Scanner::NanoZoomerS60),
            _ => Err(format!("unknown scanner `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsiRecord {
    pub wsi_id: String,
    pub image_path: PathBuf,
    pub scanner: Scanner,
    pub resolution_nm_per_px: f64,
    pub base_magnification: f64,
    pub level_count: usize,
    pub level_dimensions: Vec<(u32, u32)>,
}

const RESOLUTION_TOLERANCE_NM: f64 = 1.0;

impl WsiRecord {
    fn invalid(&self, reason: impl Into<String>) -> WsiError {
        WsiError::InvalidRecord {
            wsi_id: self.wsi_id.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<(), WsiError> {
        if self.wsi_id.trim().is_empty() {
            return Err(self.invalid("empty wsi_id"));
        }
        if !(self.resolution_nm_per_px > 0.0) {
            return Err(self.invalid("resolution must be positive"));
        }
        if !(self.base_magnification > 0.0) {
            return Err(self.invalid("base magnification must be positive"));
        }
        if self.level_count == 0 || self.level_count != self.level_dimensions.len() {
            return Err(self.invalid(format!(
                "level_count {} does not match {} level dimensions",
                self.level_count,
                self.level_dimensions.len()
            )));
        }
        if self.level_dimensions.iter().any(|&(w, h)| w == 0 || h == 0) {
            return Err(self.invalid("zero-sized level"));
        }
        for (k, pair) in self.level_dimensions.windows(2).enumerate() {
            let ((pw, ph), (w, h)) = (pair[0], pair[1]);
            let halves = |prev: u32, cur: u32| cur < prev && (2 * cur as i64 - prev as i64).abs() <= 2;
            if !halves(pw, w) || !halves(ph, h) {
                return Err(self.invalid(format!(
                    "level {} ({w}x{h}) is not a 2x reduction of level {k} ({pw}x{ph})",
                    k + 1
                )));
            }
        }
        let expected = self.scanner.nominal_resolution_nm();
        if (self.resolution_nm_per_px - expected).abs() > RESOLUTION_TOLERANCE_NM {
            return Err(self.invalid(format!(
                "resolution {} nm/px inconsistent with {} ({expected} nm/px)",
                self.resolution_nm_per_px, self.scanner
            )));
        }
        Ok(())
    }

    pub fn level_dims(&self, level: usize) -> Result<(u32, u32), WsiError> {
        self.level_dimensions
            .get(level)
            .copied()
            .ok_or_else(|| WsiError::UnknownLevel {
                wsi_id: self.wsi_id.clone(),
                level,
            })
    }

    /// Per-axis factor mapping level-0 pixels to `level` pixels (≤ 1).
    pub fn level_scale(&self, level: usize) -> Result<(f64, f64), WsiError> {
        let (w0, h0) = self.level_dims(0)?;
        let (w, h) = self.level_dims(level)?;
        Ok((w as f64 / w0 as f64, h as f64 / h0 as f64))
    }

    /// Integer downsample of `level` relative to level 0 (1, 2, 4, ...).
    pub fn downsample(&self, level: usize) -> Result<u32, WsiError> {
        self.level_dims(level)?;
        Ok(1u32 << level)
    }

    pub fn level_magnification(&self, level: usize) -> Result<f64, WsiError> {
        Ok(self.base_magnification / self.downsample(level)? as f64)
    }

    /// Level whose magnification is closest to `target` (ties go to the
    /// finer level).
    pub fn nearest_level(&self, target: f64) -> usize {
        (0..self.level_count)
            .min_by(|&a, &b| {
                let da = (self.base_magnification / (1u64 << a) as f64 - target).abs();
                let db = (self.base_magnification / (1u64 << b) as f64 - target).abs();
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .unwrap_or(0)
    }

    pub fn to_sidecar(&self) -> String {
        let dims = self
            .level_dimensions
            .iter()
            .map(|(w, h)| format!("{w}x{h}"))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "wsi_id = {}\nimage_path = {}\nscanner = {}\nresolution_nm_per_px = {}\nbase_magnification = {}\nlevel_count = {}\nlevel_dimensions = {}\n",
            self.wsi_id,
            self.image_path.display(),
            self.scanner,
            self.resolution_nm_per_px,
            self.base_magnification,
            self.level_count,
            dims
        )
    }

    /// Parse a `key = value` sidecar. `#` starts a comment. When `scanner`
    /// is absent it is inferred from the resolution and vice versa.
    pub fn from_sidecar(text: &str) -> Result<Self, WsiError> {
        let mut wsi_id = None;
        let mut image_path = None;
        let mut scanner = None;
        let mut resolution = None;
        let mut magnification = None;
        let mut level_count = None;
        let mut dims = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let bad = |reason: String| WsiError::Sidecar {
                line: line_no,
                reason,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let number = |v: &str| v.parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
            match key {
                "wsi_id" => wsi_id = Some(value.to_string()),
                "image_path" => image_path = Some(PathBuf::from(value)),
                "scanner" => scanner = Some(value.parse::<Scanner>().map_err(bad)?),
                "resolution_nm_per_px" => resolution = Some(number(value)?),
                "base_magnification" => magnification = Some(number(value)?),
                "level_count" => {
                    level_count = Some(
                        value
                            .parse::<usize>()
                            .map_err(|e| bad(format!("level_count: {e}")))?,
                    )
                }
                "level_dimensions" => {
                    let parsed = value
                        .split(',')
                        .map(|pair| {
                            let (w, h) = pair
                                .trim()
                                .split_once('x')
                                .ok_or_else(|| bad(format!("bad dimension `{pair}`")))?;
                            let w = w.trim().parse::<u32>().map_err(|e| bad(e.to_string()))?;
                            let h = h.trim().parse::<u32>().map_err(|e| bad(e.to_string()))?;
                            Ok((w, h))
                        })
                        .collect::<Result<Vec<_>, WsiError>>()?;
                    dims = Some(parsed)
                }
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        let missing = |key: &str| WsiError::Sidecar {
            line: 0,
            reason: format!("missing `{key}`"),
        };
        let scanner = match (scanner, resolution) {
            (Some(s), _) => s,
            (None, Some(r)) => Scanner::ALL
                .into_iter()
                .find(|s| (s.nominal_resolution_nm() - r).abs() <= RESOLUTION_TOLERANCE_NM)
                .ok_or_else(|| missing("scanner"))?,
            (None, None) => return Err(missing("scanner")),
        };
        let level_dimensions = dims.ok_or_else(|| missing("level_dimensions"))?;
        let record = WsiRecord {
            wsi_id: wsi_id.ok_or_else(|| missing("wsi_id"))?,
            image_path: image_path.unwrap_or_default(),
            scanner,
            resolution_nm_per_px: resolution.unwrap_or(scanner.nominal_resolution_nm()),
            base_magnification: magnification.ok_or_else(|| missing("base_magnification"))?,
            level_count: level_count.unwrap_or(level_dimensions.len()),
            level_dimensions,
        };
        record.validate()?;
        Ok(record)
    }
}

/// Builds `levels` pyramid levels from a level-0 image by 2x2 box averaging.
pub fn build_pyramid(level0: RgbImage, levels: usize) -> Vec<RgbImage> {
    let mut out = vec![level0];
    while out.len() < levels.max(1) {
        let prev = out.last().unwrap();
        let (w, h) = ((prev.width() / 2).max(1), (prev.height() / 2).max(1));
        let next = RgbImage::from_fn(w, h, |x, y| {
            let mut acc = [0u32; 3];
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let px = prev.get_pixel((2 * x + dx).min(prev.width() - 1), (2 * y + dy).min(prev.height() - 1));
                for c in 0..3 {
                    acc[c] += px[c] as u32;
                }
            }
            image::Rgb(acc.map(|v| ((v + 2) / 4) as u8))
        });
        out.push(next);
    }
    out
}

enum Backing {
    Memory,
    Directory(PathBuf),
}

/// A readable slide: metadata plus lazily decoded pyramid levels.
///
/// Level images are decoded at most once and then shared read-only, so a
/// `Slide` can be read from many worker threads concurrently.
pub struct Slide {
    record: WsiRecord,
    backing: Backing,
    levels: Vec<OnceLock<Result<RgbImage, String>>>,
}

impl Slide {
    pub fn in_memory(record: WsiRecord, levels: Vec<RgbImage>) -> Result<Self, WsiError> {
        record.validate()?;
        if levels.len() != record.level_count {
            return Err(record.invalid(format!(
                "{} images supplied for {} levels",
                levels.len(),
                record.level_count
            )));
        }
        for (k, img) in levels.iter().enumerate() {
            if img.dimensions() != record.level_dimensions[k] {
                return Err(record.invalid(format!(
                    "level {k} image is {:?}, record says {:?}",
                    img.dimensions(),
                    record.level_dimensions[k]
                )));
            }
        }
        let levels = levels
            .into_iter()
            .map(|img| {
                let cell = OnceLock::new();
                let _ = cell.set(Ok(img));
                cell
            })
            .collect();
        Ok(Slide {
            record,
            backing: Backing::Memory,
            levels,
        })
    }

    /// Opens a slide directory. Relative `image_path`s are resolved against
    /// `base_dir`.
    pub fn open(record: WsiRecord, base_dir: &Path) -> Result<Self, WsiError> {
        record.validate()?;
        let dir = if record.image_path.is_absolute() {
            record.image_path.clone()
        } else {
            base_dir.join(&record.image_path)
        };
        let levels = (0..record.level_count).map(|_| OnceLock::new()).collect();
        Ok(Slide {
            record,
            backing: Backing::Directory(dir),
            levels,
        })
    }

    pub fn record(&self) -> &WsiRecord {
        &self.record
    }

    pub fn level_path(dir: &Path, level: usize) -> PathBuf {
        dir.join(format!("level_{level}.png"))
    }

    pub fn level_image(&self, level: usize) -> Result<&RgbImage, WsiError> {
        let cell = self.levels.get(level).ok_or_else(|| WsiError::UnknownLevel {
            wsi_id: self.record.wsi_id.clone(),
            level,
        })?;
        let loaded = cell.get_or_init(|| match &self.backing {
            Backing::Memory => Err("in-memory level missing".to_string()),
            Backing::Directory(dir) => {
                let img = image::open(Self::level_path(dir, level)).map_err(|e| e.to_string())?;
                let img = img.to_rgb8();
                if img.dimensions() != self.record.level_dimensions[level] {
                    return Err(format!(
                        "image is {:?}, record says {:?}",
                        img.dimensions(),
                        self.record.level_dimensions[level]
                    ));
                }
                Ok(img)
            }
        });
        loaded.as_ref().map_err(|reason| WsiError::UnreadableImage {
            wsi_id: self.record.wsi_id.clone(),
            level,
            reason: reason.clone(),
        })
    }

    /// Reads a `size`x`size` RGB window from `level`. `origin` is given in
    /// level-0 pixels and is mapped onto the level grid by the level's
    /// integer downsample.
    pub fn read_region(&self, origin: (i64, i64), size: u32, level: usize) -> Result<RgbImage, WsiError> {
        let ds = self.record.downsample(level)? as i64;
        let (w, h) = self.record.level_dims(level)?;
        let (x, y) = (origin.0.div_euclid(ds), origin.1.div_euclid(ds));
        if origin.0 < 0 || origin.1 < 0 || x + size as i64 > w as i64 || y + size as i64 > h as i64 {
            return Err(WsiError::OutOfBounds {
                wsi_id: self.record.wsi_id.clone(),
                level,
                x: origin.0,
                y: origin.1,
                size,
                width: w,
                height: h,
            });
        }
        let img = self.level_image(level)?;
        Ok(image::imageops::crop_imm(img, x as u32, y as u32, size, size).to_image())
    }
}

/// Free-function form of [`Slide::read_region`].
pub fn read_region(slide: &Slide, origin: (i64, i64), size: u32, level: usize) -> Result<RgbImage, WsiError> {
    slide.read_region(origin, size, level)
}
