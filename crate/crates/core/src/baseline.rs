//! Colour-threshold plaque detector used when no model predictions are
//! supplied. It scores the DAB concentration of each pixel, which gives the
//! evaluation stage something deterministic to measure end to end.

use image::RgbImage;

use crate::mask::ProbMap;
use crate::stain::{nnls_2, rgb_to_od, DEFAULT_IO};

/// Stain columns (hematoxylin-like, DAB-like) and the DAB concentration
/// mapped to probability 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DabThreshold {
    pub columns: [[f64; 3]; 2],
    pub saturation: f64,
}

impl Default for DabThreshold {
    fn default() -> Self {
        let unit = |v: [f64; 3]| {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            v.map(|x| x / n)
        };
        DabThreshold {
            columns: [unit(crate::synth::DEFAULT_STAIN_MATRIX[0]), unit(crate::synth::DEFAULT_STAIN_MATRIX[1])],
            saturation: 0.5,
        }
    }
}

impl DabThreshold {
    pub fn predict(&self, image: &RgbImage) -> ProbMap {
        let od = rgb_to_od(image, DEFAULT_IO);
        let data = od.data.iter().map(|v| (nnls_2(&self.columns, v)[1] / self.saturation).clamp(0.0, 1.0)).collect();
        ProbMap::new(od.width, od.height, data).expect("one value per pixel")
    }
}
