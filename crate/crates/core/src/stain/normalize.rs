use image::RgbImage;

use super::{nnls_2, od_to_rgb, rgb_to_od, OdImage, StainError, StainProfile, DEFAULT_IO};

/// Per-pixel non-negative concentrations of `od` under `profile`.
pub fn concentrations(od: &OdImage, profile: &StainProfile) -> Vec<[f64; 2]> {
    let cols = [profile.column(0), profile.column(1)];
    od.data.iter().map(|v| nnls_2(&cols, v)).collect()
}

/// Re-expresses `image` in the reference stain space: concentrations under
/// `source` are rescaled by the ratio of max concentrations and rendered
/// through the reference stain vectors. The part of each pixel's OD the
/// source stains do not explain is added back unchanged, so transferring
/// an image onto its own profile returns it.
pub fn normalize_to_reference(image: &RgbImage, source: &StainProfile, reference: &StainProfile) -> Result<RgbImage, StainError> {
    if source.method != reference.method {
        return Err(StainError::MethodMismatch {
            source_method: source.method,
            reference_method: reference.method,
        });
    }
    source.validate()?;
    reference.validate()?;
    let od = rgb_to_od(image, DEFAULT_IO);
    let scale = [
        reference.max_concentrations[0] / source.max_concentrations[0],
        reference.max_concentrations[1] / source.max_concentrations[1],
    ];
    let (r0, r1) = (reference.column(0), reference.column(1));
    let (s0, s1) = (source.column(0), source.column(1));
    let data = concentrations(&od, source)
        .into_iter()
        .zip(&od.data)
        .map(|(c, v)| {
            let (a, b) = (c[0] * scale[0], c[1] * scale[1]);
            std::array::from_fn(|k| r0[k] * a + r1[k] * b + (v[k] - s0[k] * c[0] - s1[k] * c[1]))
        })
        .collect();
    Ok(od_to_rgb(
        &OdImage {
            width: od.width,
            height: od.height,
            data,
        },
        DEFAULT_IO,
    ))
}
