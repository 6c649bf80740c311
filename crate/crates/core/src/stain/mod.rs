//! Stain estimation and normalization for two-stain brightfield images.
//!
//! Pixels are mapped to optical density (OD) with the Beer–Lambert law,
//! `od = -log10((I + 1) / io)`, where stains mix linearly. A stain profile
//! holds the unit OD color of each stain (the columns of a 3x2 matrix) and a
//! robust maximum concentration per stain. Two estimators are provided:
//! [`estimate_stains_macenko`] (plane projection + angular percentiles) and
//! [`estimate_stains_vahadane`] (sparse non-negative dictionary learning).
//!
//! Column 0 is the hematoxylin-like stain, column 1 the DAB-like stain; the
//! column with the larger red-channel OD is placed first.

mod macenko;
mod normalize;
mod solve;
mod vahadane;

pub use macenko::{estimate_stains_macenko, macenko_from_od, MacenkoParams};
pub use normalize::{concentrations, normalize_to_reference};
pub use solve::{nonneg_lasso_2, nnls_2};
pub use vahadane::{estimate_stains_vahadane, is_non_increasing, vahadane_from_od, VahadaneFit, VahadaneParams};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_IO: f64 = 255.0;
/// Smallest angle between the two stain vectors of a valid profile.
pub const MIN_STAIN_ANGLE_DEG: f64 = 5.0;
/// Tissue pixels required before estimation is attempted.
pub const MIN_TISSUE_PIXELS: usize = 100;
/// Percentile of solved concentrations used as the per-stain maximum.
pub const MAX_CONCENTRATION_PERCENTILE: f64 = 99.0;

#[derive(Debug, Error)]
pub enum StainError {
    #[error("only {found} tissue pixels above the OD threshold, {required} required")]
    InsufficientTissue { found: usize, required: usize },
    #[error("stain vectors are degenerate ({reason})")]
    DegenerateStains { reason: String },
    #[error("profile methods differ: source {source_method}, reference {reference_method}")]
    MethodMismatch {
        source_method: StainMethod,
        reference_method: StainMethod,
    },
    #[error("invalid stain profile: {0}")]
    InvalidProfile(String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StainMethod {
    Macenko,
    Vahadane,
}

impl fmt::Display for StainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StainMethod::Macenko => "macenko",
            StainMethod::Vahadane => "vahadane",
        })
    }
}

impl FromStr for StainMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "macenko" => Ok(StainMethod::Macenko),
            "vahadane" => Ok(StainMethod::Vahadane),
            other => Err(format!("unknown stain method `{other}`")),
        }
    }
}

/// Parameters an estimate was produced with, persisted alongside it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationPercentiles {
    /// Angular percentile (Macenko only).
    pub alpha: Option<f64>,
    /// OD magnitude threshold separating tissue from background.
    pub beta: f64,
    pub max_concentration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StainProfile {
    pub method: StainMethod,
    /// Row-major 3x2; column `j` is the unit OD vector of stain `j`.
    pub stain_matrix: [[f64; 2]; 3],
    pub max_concentrations: [f64; 2],
    pub percentiles: EstimationPercentiles,
    #[serde(default)]
    pub reference_id: Option<String>,
}

impl StainProfile {
    pub fn column(&self, j: usize) -> [f64; 3] {
        [self.stain_matrix[0][j], self.stain_matrix[1][j], self.stain_matrix[2][j]]
    }

    pub fn from_columns(method: StainMethod, cols: [[f64; 3]; 2], max_concentrations: [f64; 2], percentiles: EstimationPercentiles) -> Self {
        StainProfile {
            method,
            stain_matrix: [[cols[0][0], cols[1][0]], [cols[0][1], cols[1][1]], [cols[0][2], cols[1][2]]],
            max_concentrations,
            percentiles,
            reference_id: None,
        }
    }

    pub fn validate(&self) -> Result<(), StainError> {
        for j in 0..2 {
            let c = self.column(j);
            let n = norm(&c);
            if (n - 1.0).abs() > 1e-6 {
                return Err(StainError::InvalidProfile(format!("column {j} has norm {n}")));
            }
            if c.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(StainError::InvalidProfile(format!("column {j} has a negative entry")));
            }
        }
        let angle = angle_deg(&self.column(0), &self.column(1));
        if angle < MIN_STAIN_ANGLE_DEG {
            return Err(StainError::InvalidProfile(format!("columns only {angle:.2}° apart")));
        }
        if self.max_concentrations.iter().any(|&m| !(m > 0.0)) {
            return Err(StainError::InvalidProfile("max concentrations must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, StainError> {
        let p: StainProfile = serde_json::from_str(text).map_err(|e| StainError::InvalidProfile(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, StainError> {
        let text = std::fs::read_to_string(path).map_err(|e| StainError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), StainError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| StainError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

/// Per-pixel OD triplets in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct OdImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f64; 3]>,
}

#[inline]
pub fn intensity_to_od(v: u8, io: f64) -> f64 {
    (-((v as f64 + 1.0) / io).log10()).max(0.0)
}

#[inline]
pub fn od_to_intensity(od: f64, io: f64) -> u8 {
    (io * 10f64.powf(-od) - 1.0).round().clamp(0.0, 255.0) as u8
}

pub fn rgb_to_od(image: &RgbImage, io: f64) -> OdImage {
    let lut: Vec<f64> = (0..=255u8).map(|v| intensity_to_od(v, io)).collect();
    OdImage {
        width: image.width(),
        height: image.height(),
        data: image
            .pixels()
            .map(|p| [lut[p[0] as usize], lut[p[1] as usize], lut[p[2] as usize]])
            .collect(),
    }
}

pub fn od_to_rgb(od: &OdImage, io: f64) -> RgbImage {
    let mut img = RgbImage::new(od.width, od.height);
    for (px, v) in img.pixels_mut().zip(&od.data) {
        *px = image::Rgb([od_to_intensity(v[0], io), od_to_intensity(v[1], io), od_to_intensity(v[2], io)]);
    }
    img
}

/// Beer–Lambert forward model: renders per-pixel concentrations through a
/// stain matrix (columns given as OD vectors).
pub fn render_concentrations(columns: &[[f64; 3]; 2], conc: &[[f64; 2]], width: u32, height: u32, io: f64) -> RgbImage {
    assert_eq!(conc.len(), width as usize * height as usize);
    let data = conc
        .iter()
        .map(|c| std::array::from_fn(|k| columns[0][k] * c[0] + columns[1][k] * c[1]))
        .collect();
    od_to_rgb(&OdImage { width, height, data }, io)
}

pub(crate) fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Angle between two vectors in degrees.
pub fn angle_deg(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let c = dot(a, b) / (norm(a) * norm(b));
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Linear-interpolation percentile (`p` in [0, 100]) of unsorted data.
pub(crate) fn percentile(values: &mut [f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// Flips a direction into the non-negative orthant, clips residual negative
/// entries and rescales to unit length.
pub(crate) fn nonneg_unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let s = if v.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
    let clipped = v.map(|x| (x * s).max(0.0));
    let n = norm(&clipped);
    (n > 1e-12).then(|| clipped.map(|x| x / n))
}

/// Puts the column with the larger red OD first.
pub(crate) fn order_columns(a: [f64; 3], b: [f64; 3]) -> [[f64; 3]; 2] {
    if a[0] >= b[0] {
        [a, b]
    } else {
        [b, a]
    }
}

pub(crate) fn tissue_od(od: &[[f64; 3]], beta: f64) -> Vec<[f64; 3]> {
    od.iter().copied().filter(|v| norm(v) > beta).collect()
}

/// 99th-percentile non-negative concentration per stain.
pub(crate) fn max_concentrations(od: &[[f64; 3]], columns: &[[f64; 3]; 2]) -> Result<[f64; 2], StainError> {
    let (mut c0, mut c1): (Vec<f64>, Vec<f64>) = od.iter().map(|v| {
        let c = nnls_2(columns, v);
        (c[0], c[1])
    }).unzip();
    let m = [
        percentile(&mut c0, MAX_CONCENTRATION_PERCENTILE),
        percentile(&mut c1, MAX_CONCENTRATION_PERCENTILE),
    ];
    if m.iter().any(|&v| !(v > 0.0)) {
        return Err(StainError::DegenerateStains {
            reason: format!("max concentrations {m:?}"),
        });
    }
    Ok(m)
}
