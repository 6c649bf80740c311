//! Expert plaque outlines: the polygon ROI model, geometry helpers and the
//! XML annotation format.

mod geometry;
mod xml;

pub use geometry::{bounding_box, centroid, point_in_polygon, polygon_area, scale_to_level, signed_area, BBox};
pub use xml::{parse_annotation_file, write_annotation_file};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Areas below this are treated as degenerate (px² at level 0).
pub const MIN_POLYGON_AREA: f64 = 1e-9;

pub const DEFAULT_LABEL: &str = "neuritic_plaque";

#[derive(Debug, Error, PartialEq)]
pub enum AnnotationError {
    #[error("malformed XML: {0}")]
    MalformedXml(String),
    #[error("schema violation in {roi_id}: {reason}")]
    SchemaViolation { roi_id: String, reason: String },
    #[error("{roi_id}: vertex ({x}, {y}) outside level-0 extent {width}x{height}")]
    OutOfBounds {
        roi_id: String,
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },
    #[error("{roi_id}: degenerate polygon (area {area})")]
    DegeneratePolygon { roi_id: String, area: f64 },
    #[error("unknown pyramid level {0}")]
    UnknownLevel(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Point { x, y }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonRoi {
    pub roi_id: String,
    pub wsi_id: String,
    pub label: String,
    /// Level-0 pixel coordinates, canonical counter-clockwise order
    /// (positive signed shoelace area).
    pub vertices: Vec<Point>,
    pub closed: bool,
}

impl PolygonRoi {
    pub fn new(roi_id: impl Into<String>, wsi_id: impl Into<String>, vertices: Vec<Point>) -> Self {
        PolygonRoi {
            roi_id: roi_id.into(),
            wsi_id: wsi_id.into(),
            label: DEFAULT_LABEL.to_string(),
            vertices,
            closed: true,
        }
    }

    /// Reorders vertices so the signed area is positive. The first vertex
    /// stays first.
    pub fn canonicalize(&mut self) {
        if signed_area(&self.vertices) < 0.0 {
            self.vertices[1..].reverse();
        }
    }

    /// Structural checks shared by the parser and programmatic callers.
    pub fn validate(&self, extent: Option<(u32, u32)>) -> Result<(), AnnotationError> {
        let violation = |reason: String| AnnotationError::SchemaViolation {
            roi_id: self.roi_id.clone(),
            reason,
        };
        if self.vertices.len() < 3 {
            return Err(violation(format!("{} vertices, at least 3 required", self.vertices.len())));
        }
        if let Some(v) = self.vertices.iter().find(|v| !v.x.is_finite() || !v.y.is_finite()) {
            return Err(violation(format!("non-finite vertex ({}, {})", v.x, v.y)));
        }
        let n = self.vertices.len();
        for i in 0..n {
            if self.vertices[i] == self.vertices[(i + 1) % n] {
                return Err(violation(format!("vertex {i} repeats its successor")));
            }
        }
        if let Some((width, height)) = extent {
            if let Some(v) = self
                .vertices
                .iter()
                .find(|v| v.x < 0.0 || v.y < 0.0 || v.x > width as f64 || v.y > height as f64)
            {
                return Err(AnnotationError::OutOfBounds {
                    roi_id: self.roi_id.clone(),
                    x: v.x,
                    y: v.y,
                    width,
                    height,
                });
            }
        }
        polygon_area(self)?;
        Ok(())
    }
}
