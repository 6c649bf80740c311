//! Patch-dataset preparation and segmentation scoring for neuritic-plaque
//! whole-slide images.

pub mod annotations;
pub mod augmentation;
pub mod baseline;
pub mod config;
pub mod folds;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod stain;
pub mod synth;
pub mod tiling;
pub mod wsi;
