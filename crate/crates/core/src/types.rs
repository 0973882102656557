//! Geometry and provenance types shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary mask stored row-major, one byte per pixel holding 0 or 1.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({}x{}, {} fg)", self.width, self.height, self.count())
    }
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![1; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        Self { width, height, data }
    }

    /// Builds a mask from row-major values that must all be 0 or 1.
    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "mask data has {} values for {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|v| *v > 1) {
            return Err(Error::Shape("mask values must be 0 or 1".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value as u8;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|v| *v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|v| *v == 0)
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = Point> + '_ {
        self.data.iter().enumerate().filter(|(_, v)| **v != 0).map(move |(i, _)| Point {
            x: (i % self.width) as u32,
            y: (i / self.width) as u32,
        })
    }

    pub fn ensure_same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Copies the mask into a new grid shifted by (dx, dy); pixels leaving the frame are dropped.
    pub fn translated(&self, dx: i64, dy: i64) -> Self {
        let mut out = Self::empty(self.width, self.height);
        for p in self.foreground() {
            let nx = p.x as i64 + dx;
            let ny = p.y as i64 + dy;
            if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height {
                out.set(nx as usize, ny as usize, true);
            }
        }
        out
    }
}

/// Pixel coordinate, origin top-left, x to the right and y down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point {
    pub x: u32,
    pub y: u32,
}

impl Point {
    pub fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned box `(x1, y1, x2, y2)`: inclusive top-left, exclusive bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BoundingBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> u32 {
        self.x2.saturating_sub(self.x1)
    }

    pub fn height(&self) -> u32 {
        self.y2.saturating_sub(self.y1)
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn contains_point(&self, p: Point) -> bool {
        p.x >= self.x1 && p.x < self.x2 && p.y >= self.y1 && p.y < self.y2
    }

    /// Errors unless the box has positive area and lies within a `width`×`height` image.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.area() == 0 {
            return Err(Error::Prompt(format!("degenerate box {self:?}")));
        }
        if self.x2 as usize > width || self.y2 as usize > height {
            return Err(Error::Prompt(format!(
                "box {self:?} outside {width}x{height} image"
            )));
        }
        Ok(())
    }
}

/// Tag of a decoder prompt token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Text,
    DenseSummary,
    Point,
    BoxCorner,
}

/// Where a geometric prompt came from; the evaluation audit checks these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrigin {
    /// Computed from the model's own previous prediction.
    Prediction,
    /// Drawn uniformly from the previous prediction's foreground.
    PredictionSample,
    /// Sampled from a ground-truth mask.
    GroundTruth,
    /// Ground-truth box loosened by random perturbation.
    PerturbedGroundTruth,
}

impl PromptOrigin {
    pub fn uses_ground_truth(&self) -> bool {
        matches!(self, PromptOrigin::GroundTruth | PromptOrigin::PerturbedGroundTruth)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    GroundTruth,
    Prediction { iteration: usize, prompts: Vec<PromptKind> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRecord {
    pub mask: BinaryMask,
    pub source: MaskSource,
}

impl MaskRecord {
    pub fn ground_truth(mask: BinaryMask) -> Self {
        Self { mask, source: MaskSource::GroundTruth }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn foreground_is_row_major() {
        let m = BinaryMask::from_fn(4, 3, |x, y| (x, y) == (3, 0) || (x, y) == (0, 2));
        let pts: Vec<_> = m.foreground().collect();
        assert_eq!(pts, vec![Point::new(3, 0), Point::new(0, 2)]);
        assert_eq!(m.count(), 2);
    }

    #[test]
    fn from_vec_rejects_non_binary() {
        assert!(BinaryMask::from_vec(2, 1, vec![0, 2]).is_err());
        assert!(BinaryMask::from_vec(2, 2, vec![0, 1]).is_err());
    }

    #[test]
    fn box_validation() {
        assert!(BoundingBox::new(3, 3, 3, 9).validate(10, 10).is_err());
        assert!(BoundingBox::new(0, 0, 11, 5).validate(10, 10).is_err());
        BoundingBox::new(0, 0, 10, 10).validate(10, 10).unwrap();
    }
}
