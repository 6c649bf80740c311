use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::mask::{BinaryMask, ProbMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    DiceLoss,
    BceDice,
    Focal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub bce_weight: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub eps: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            bce_weight: 0.5,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            eps: 1e-7,
        }
    }
}

/// Loss of a probability map against a binary ground truth. Log terms use
/// probabilities clamped to `[eps, 1 − eps]`; the soft Dice term uses the
/// raw probabilities.
pub fn loss_value(kind: LossKind, prob: &ProbMap, gt: &BinaryMask, params: &LossParams) -> Result<f64, MetricsError> {
    if prob.dims() != gt.dims() {
        return Err(MetricsError::ShapeMismatch {
            left: prob.dims(),
            right: gt.dims(),
        });
    }
    let p = prob.as_slice();
    let g = gt.as_slice();
    Ok(match kind {
        LossKind::Bce => bce(p, g, params.eps),
        LossKind::DiceLoss => dice_loss(p, g, params.eps),
        LossKind::BceDice => params.bce_weight * bce(p, g, params.eps) + (1.0 - params.bce_weight) * dice_loss(p, g, params.eps),
        LossKind::Focal => focal(p, g, params),
    })
}

fn clamp(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

fn mean(total: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

fn bce(p: &[f64], g: &[u8], eps: f64) -> f64 {
    let total: f64 = p
        .iter()
        .zip(g)
        .map(|(&p, &g)| {
            let p = clamp(p, eps);
            if g != 0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    mean(total, p.len())
}

fn dice_loss(p: &[f64], g: &[u8], eps: f64) -> f64 {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in p.iter().zip(g) {
        let g = f64::from(u8::from(g != 0));
        inter += p * g;
        sp += p;
        sg += g;
    }
    1.0 - (2.0 * inter + eps) / (sp + sg + eps)
}

fn focal(p: &[f64], g: &[u8], params: &LossParams) -> f64 {
    let total: f64 = p
        .iter()
        .zip(g)
        .map(|(&p, &g)| {
            let p = clamp(p, params.eps);
            let pt = if g != 0 { p } else { 1.0 - p };
            -params.focal_alpha * (1.0 - pt).powf(params.focal_gamma) * pt.ln()
        })
        .sum();
    mean(total, p.len())
}
