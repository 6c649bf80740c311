use image::RgbImage;
use nalgebra::{Matrix3, SymmetricEigen};

use super::{
    angle_deg, dot, max_concentrations, nonneg_unit, order_columns, percentile, rgb_to_od, tissue_od, EstimationPercentiles, StainError,
    StainMethod, StainProfile, DEFAULT_IO, MAX_CONCENTRATION_PERCENTILE, MIN_STAIN_ANGLE_DEG, MIN_TISSUE_PIXELS,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacenkoParams {
    /// OD magnitude below which a pixel counts as background.
    pub beta: f64,
    /// Angular percentile (and 100 − alpha) taken as the stain extremes.
    pub alpha: f64,
    pub io: f64,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        MacenkoParams {
            beta: 0.15,
            alpha: 1.0,
            io: DEFAULT_IO,
        }
    }
}

pub fn estimate_stains_macenko(image: &RgbImage, params: &MacenkoParams) -> Result<StainProfile, StainError> {
    macenko_from_od(&rgb_to_od(image, params.io).data, params)
}

/// Macenko estimate over a pool of OD pixels (e.g. several patches of one
/// slide).
pub fn macenko_from_od(od: &[[f64; 3]], params: &MacenkoParams) -> Result<StainProfile, StainError> {
    let tissue = tissue_od(od, params.beta);
    if tissue.len() < MIN_TISSUE_PIXELS {
        return Err(StainError::InsufficientTissue {
            found: tissue.len(),
            required: MIN_TISSUE_PIXELS,
        });
    }

    // right singular vectors of the tissue OD matrix = eigenvectors of ODᵀOD
    let mut gram = Matrix3::<f64>::zeros();
    for v in &tissue {
        for r in 0..3 {
            for c in 0..3 {
                gram[(r, c)] += v[r] * v[c];
            }
        }
    }
    let eig = SymmetricEigen::new(gram);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| -> [f64; 3] {
        let col = eig.eigenvectors.column(order[k]);
        [col[0], col[1], col[2]]
    };
    let mut v1 = axis(0);
    let mut v2 = axis(1);
    if v1.iter().sum::<f64>() < 0.0 {
        v1 = v1.map(|x| -x);
    }
    let pivot = v2.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
    if pivot < 0.0 {
        v2 = v2.map(|x| -x);
    }

    let mut angles: Vec<f64> = tissue.iter().map(|v| dot(v, &v2).atan2(dot(v, &v1))).collect();
    let lo = percentile(&mut angles, params.alpha);
    let hi = percentile(&mut angles, 100.0 - params.alpha);
    let direction = |phi: f64| -> [f64; 3] { std::array::from_fn(|k| v1[k] * phi.cos() + v2[k] * phi.sin()) };
    let degenerate = |reason: String| StainError::DegenerateStains { reason };
    let a = nonneg_unit(direction(lo)).ok_or_else(|| degenerate("extreme direction outside the OD orthant".into()))?;
    let b = nonneg_unit(direction(hi)).ok_or_else(|| degenerate("extreme direction outside the OD orthant".into()))?;
    let angle = angle_deg(&a, &b);
    if angle < MIN_STAIN_ANGLE_DEG {
        return Err(degenerate(format!("stain vectors only {angle:.2}° apart")));
    }
    let columns = order_columns(a, b);
    let max = max_concentrations(&tissue, &columns)?;
    Ok(StainProfile::from_columns(
        StainMethod::Macenko,
        columns,
        max,
        EstimationPercentiles {
            alpha: Some(params.alpha),
            beta: params.beta,
            max_concentration: MAX_CONCENTRATION_PERCENTILE,
        },
    ))
}
