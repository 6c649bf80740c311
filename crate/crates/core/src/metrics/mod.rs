//! Pixel-wise segmentation scores, loss values, and per-run tables.

mod loss;
mod table;

pub use loss::{loss_value, LossKind, LossParams};
pub use table::{aggregate_records, emit_table, parse_table, read_table, AggregateStats, ColumnStats, MetricsRecord, Table, COLUMNS};

use std::ops::{Add, AddAssign};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{BinaryMask, ProbMap};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: (u32, u32), right: (u32, u32) },
    #[error("no records to aggregate")]
    EmptyInput,
    #[error("record {fold_name} has different columns from the first record")]
    RaggedColumns { fold_name: String },
    #[error("value {value} in column {column} of {fold_name} is outside [0, 1]")]
    OutOfRange { fold_name: String, column: String, value: f64 },
    #[error("table parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Pixel `i` is foreground iff `prob[i] >= threshold`.
pub fn binarize(prob: &ProbMap, threshold: f64) -> BinaryMask {
    let (w, h) = prob.dims();
    let data = prob.as_slice().iter().map(|&p| u8::from(p >= threshold)).collect();
    BinaryMask::from_vec(w, h, data).expect("same length as the map")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts, MetricsError> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::ShapeMismatch {
            left: pred.dims(),
            right: gt.dims(),
        });
    }
    // index = 2·pred + gt
    let mut bins = [0u64; 4];
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        bins[(usize::from(p != 0) << 1) | usize::from(g != 0)] += 1;
    }
    Ok(ConfusionCounts {
        tn: bins[0],
        fn_: bins[1],
        fp: bins[2],
        tp: bins[3],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub dice: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Scores from one set of counts. With `smooth = 0` an empty prediction on
/// an empty ground truth scores 1.0 everywhere, and a ratio whose
/// denominator is zero otherwise scores 0.
pub fn segmentation_scores(c: &ConfusionCounts, smooth: f64) -> Scores {
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    if c.tp + c.fp + c.fn_ == 0 && smooth == 0.0 {
        return Scores {
            dice: 1.0,
            f1: 1.0,
            precision: 1.0,
            recall: 1.0,
        };
    }
    let ratio = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
    let precision = ratio(tp + smooth, tp + fp + smooth);
    let recall = ratio(tp + smooth, tp + fn_ + smooth);
    let dice = ratio(2.0 * tp + smooth, 2.0 * tp + fp + fn_ + smooth);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    Scores {
        dice,
        f1,
        precision,
        recall,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Scores of the summed confusion counts over all patches.
    #[default]
    Pooled,
    /// Mean of per-patch scores.
    PerPatchMean,
}

impl std::str::FromStr for Granularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pooled" => Ok(Granularity::Pooled),
            "per_patch_mean" => Ok(Granularity::PerPatchMean),
            other => Err(format!("unknown granularity {other:?}")),
        }
    }
}

/// Scores for a split of (prediction, ground truth) pairs. An empty split
/// is scored as empty-vs-empty.
pub fn split_scores(pairs: &[(BinaryMask, BinaryMask)], granularity: Granularity, smooth: f64) -> Result<Scores, MetricsError> {
    let counts: Vec<ConfusionCounts> = pairs.par_iter().map(|(p, g)| confusion_counts(p, g)).collect::<Result<_, _>>()?;
    Ok(scores_from_counts(&counts, granularity, smooth))
}

/// Split scores from per-patch confusion counts.
pub fn scores_from_counts(counts: &[ConfusionCounts], granularity: Granularity, smooth: f64) -> Scores {
    match granularity {
        Granularity::Pooled => segmentation_scores(&counts.iter().copied().sum(), smooth),
        Granularity::PerPatchMean => {
            if counts.is_empty() {
                return segmentation_scores(&ConfusionCounts::default(), smooth);
            }
            let n = counts.len() as f64;
            let mut acc = [0.0; 4];
            for c in counts {
                let s = segmentation_scores(c, smooth);
                acc[0] += s.dice;
                acc[1] += s.f1;
                acc[2] += s.precision;
                acc[3] += s.recall;
            }
            Scores {
                dice: acc[0] / n,
                f1: acc[1] / n,
                precision: acc[2] / n,
                recall: acc[3] / n,
            }
        }
    }
}
