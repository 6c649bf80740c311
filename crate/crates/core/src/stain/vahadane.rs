//! Sparse non-negative stain separation.
//!
//! Minimizes `‖OD − D·C‖²_F + λ‖C‖₁` over `D ∈ R^{3×2}` (non-negative
//! columns, norm ≤ 1) and `C ≥ 0` by alternating exact block updates: every
//! pixel's two concentrations are solved exactly for fixed `D`, then each
//! dictionary column is minimized exactly for fixed `C` (the column
//! subproblem is isotropic, so projecting its unconstrained minimizer onto
//! the non-negative unit ball is exact). Each block step can only lower the
//! objective, so the recorded per-iteration objective never increases.

use image::RgbImage;

use super::{
    angle_deg, dot, max_concentrations, nonneg_lasso_2, norm, order_columns, rgb_to_od, tissue_od, EstimationPercentiles, StainError,
    StainMethod, StainProfile, DEFAULT_IO, MAX_CONCENTRATION_PERCENTILE, MIN_STAIN_ANGLE_DEG, MIN_TISSUE_PIXELS,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VahadaneParams {
    pub sparsity_lambda: f64,
    pub n_iter: usize,
    /// Relative objective change below which iteration stops.
    pub tol: f64,
    pub beta: f64,
    pub io: f64,
}

impl Default for VahadaneParams {
    fn default() -> Self {
        VahadaneParams {
            sparsity_lambda: 0.1,
            n_iter: 200,
            tol: 1e-6,
            beta: 0.15,
            io: DEFAULT_IO,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VahadaneFit {
    pub profile: StainProfile,
    /// Objective after each outer iteration.
    pub objective_trace: Vec<f64>,
    /// False when `n_iter` ran out before the tolerance was met.
    pub converged: bool,
    /// `‖OD − D·C‖_F / ‖OD‖_F` over tissue pixels at the final iterate.
    pub relative_residual: f64,
}

pub fn estimate_stains_vahadane(image: &RgbImage, params: &VahadaneParams) -> Result<VahadaneFit, StainError> {
    vahadane_from_od(&rgb_to_od(image, params.io).data, params)
}

/// Starting dictionary: the pixels at the 1st and 99th percentile of the
/// red share of OD. Ties are broken on the OD values, so the choice does not
/// depend on pixel order.
fn initial_dictionary(tissue: &[[f64; 3]]) -> [[f64; 3]; 2] {
    let mut ranked: Vec<(f64, [f64; 3])> = tissue.iter().map(|v| (v[0] / norm(v), *v)).collect();
    ranked.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1[0].total_cmp(&b.1[0]))
            .then(a.1[1].total_cmp(&b.1[1]))
            .then(a.1[2].total_cmp(&b.1[2]))
    });
    let pick = |q: f64| {
        let v = ranked[((ranked.len() - 1) as f64 * q).round() as usize].1;
        let n = norm(&v);
        v.map(|x| x / n)
    };
    [pick(0.99), pick(0.01)]
}

fn objective(od: &[[f64; 3]], dict: &[[f64; 3]; 2], conc: &[[f64; 2]], lambda: f64) -> f64 {
    od.iter()
        .zip(conc)
        .map(|(v, c)| {
            let mut r2 = 0.0;
            for k in 0..3 {
                let r = v[k] - dict[0][k] * c[0] - dict[1][k] * c[1];
                r2 += r * r;
            }
            r2 + lambda * (c[0] + c[1])
        })
        .sum()
}

fn project_nonneg_ball(v: [f64; 3]) -> [f64; 3] {
    let clipped = v.map(|x| x.max(0.0));
    let n = norm(&clipped);
    if n > 1.0 {
        clipped.map(|x| x / n)
    } else {
        clipped
    }
}

pub fn vahadane_from_od(od: &[[f64; 3]], params: &VahadaneParams) -> Result<VahadaneFit, StainError> {
    let tissue = tissue_od(od, params.beta);
    if tissue.len() < MIN_TISSUE_PIXELS {
        return Err(StainError::InsufficientTissue {
            found: tissue.len(),
            required: MIN_TISSUE_PIXELS,
        });
    }
    let lambda = params.sparsity_lambda;
    let mut dict = initial_dictionary(&tissue);
    let mut conc: Vec<[f64; 2]> = vec![[0.0; 2]; tissue.len()];
    let mut trace: Vec<f64> = Vec::with_capacity(params.n_iter);
    let mut converged = false;

    for _ in 0..params.n_iter.max(1) {
        for (c, v) in conc.iter_mut().zip(&tissue) {
            *c = nonneg_lasso_2(&dict, v, lambda);
        }

        // A = CᵀC, B = ODᵀC
        let mut a = [[0.0f64; 2]; 2];
        let mut b = [[0.0f64; 2]; 3];
        for (c, v) in conc.iter().zip(&tissue) {
            for i in 0..2 {
                for j in 0..2 {
                    a[i][j] += c[i] * c[j];
                }
                for k in 0..3 {
                    b[k][i] += v[k] * c[i];
                }
            }
        }
        for j in 0..2 {
            if a[j][j] <= 0.0 {
                continue;
            }
            let other = 1 - j;
            let target: [f64; 3] =
                std::array::from_fn(|k| dict[j][k] + (b[k][j] - dict[j][k] * a[j][j] - dict[other][k] * a[other][j]) / a[j][j]);
            dict[j] = project_nonneg_ball(target);
        }

        let f = objective(&tissue, &dict, &conc, lambda);
        let done = trace.last().is_some_and(|&prev| (prev - f).abs() <= params.tol * prev.abs().max(f64::MIN_POSITIVE));
        trace.push(f);
        if done {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("sparse stain separation did not reach tol {} in {} iterations", params.tol, params.n_iter);
    }

    let degenerate = |reason: String| StainError::DegenerateStains { reason };
    let mut units = [[0.0; 3]; 2];
    for j in 0..2 {
        let n = norm(&dict[j]);
        if n < 1e-9 {
            return Err(degenerate(format!("dictionary column {j} vanished")));
        }
        units[j] = dict[j].map(|x| x / n);
    }
    let angle = angle_deg(&units[0], &units[1]);
    if angle < MIN_STAIN_ANGLE_DEG {
        return Err(degenerate(format!("stain vectors only {angle:.2}° apart")));
    }

    let (mut res2, mut tot2) = (0.0, 0.0);
    for (v, c) in tissue.iter().zip(&conc) {
        for k in 0..3 {
            let r = v[k] - dict[0][k] * c[0] - dict[1][k] * c[1];
            res2 += r * r;
        }
        tot2 += dot(v, v);
    }

    let columns = order_columns(units[0], units[1]);
    let max = max_concentrations(&tissue, &columns)?;
    Ok(VahadaneFit {
        profile: StainProfile::from_columns(
            StainMethod::Vahadane,
            columns,
            max,
            EstimationPercentiles {
                alpha: None,
                beta: params.beta,
                max_concentration: MAX_CONCENTRATION_PERCENTILE,
            },
        ),
        objective_trace: trace,
        converged,
        relative_residual: (res2 / tot2).sqrt(),
    })
}

/// True when every step of `trace` is non-increasing up to floating-point
/// summation noise (relative 1e-12).
pub fn is_non_increasing(trace: &[f64]) -> bool {
    trace.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs())
}
