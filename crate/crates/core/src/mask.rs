//! Binary masks and probability maps shared by tiling, augmentation and
//! scoring.

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

/// Row-major binary buffer; every cell is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(width: u32, height: u32) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn ones(width: u32, height: u32) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![1; width as usize * height as usize],
        }
    }

    /// Any nonzero input byte becomes 1.
    pub fn from_vec(width: u32, height: u32, data: Vec<u8>) -> Option<Self> {
        if data.len() != width as usize * height as usize {
            return None;
        }
        Some(BinaryMask {
            width,
            height,
            data: data.into_iter().map(|v| (v != 0) as u8).collect(),
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        BinaryMask { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize] != 0
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.data[y as usize * self.width as usize + x as usize] = value as u8;
    }

    pub fn count_ones(&self) -> u64 {
        self.data.iter().map(|&v| v as u64).sum()
    }

    /// Logical OR in place. Panics on shape mismatch.
    pub fn union_with(&mut self, other: &BinaryMask) {
        assert_eq!(self.dims(), other.dims(), "mask shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
    }

    /// Half-open pixel bounds `(x0, y0, x1, y1)` of the foreground.
    pub fn foreground_bbox(&self) -> Option<(u32, u32, u32, u32)> {
        let mut bbox: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            let row = &self.data[y as usize * self.width as usize..(y as usize + 1) * self.width as usize];
            let Some(first) = row.iter().position(|&v| v != 0) else {
                continue;
            };
            let last = row.iter().rposition(|&v| v != 0).unwrap();
            let (first, last) = (first as u32, last as u32);
            bbox = Some(match bbox {
                None => (first, y, last + 1, y + 1),
                Some((x0, y0, x1, _)) => (x0.min(first), y0, x1.max(last + 1), y + 1),
            });
        }
        bbox
    }

    /// Single-channel image with values {0, 255}.
    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| Luma([if self.get(x, y) { 255 } else { 0 }]))
    }

    /// Pixels ≥ 128 are foreground.
    pub fn from_image(img: &GrayImage) -> Self {
        BinaryMask {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().iter().map(|&v| (v >= 128) as u8).collect(),
        }
    }
}

/// Row-major per-pixel probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Option<Self> {
        (data.len() == width as usize * height as usize).then_some(ProbMap { width, height, data })
    }

    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        ProbMap {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    /// Gray levels scaled to [0, 1].
    pub fn from_image(img: &GrayImage) -> Self {
        ProbMap {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

impl From<&BinaryMask> for ProbMap {
    fn from(mask: &BinaryMask) -> Self {
        ProbMap {
            width: mask.width,
            height: mask.height,
            data: mask.data.iter().map(|&v| v as f64).collect(),
        }
    }
}
