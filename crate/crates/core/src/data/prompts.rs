//! Simulated manual prompts: loosened ground-truth boxes and sampled points.

use rand::Rng;

use crate::error::{Error, Result};
use crate::types::{BinaryMask, BoundingBox, Point};

pub const PERTURB_MIN: u32 = 10;
pub const PERTURB_MAX: u32 = 15;

/// Moves each edge of `bbox` outward by an independent uniform integer in
/// [10, 15] pixels, then clips to the `width`×`height` image.
pub fn perturb_bbox(bbox: BoundingBox, width: usize, height: usize, rng: &mut impl Rng) -> Result<BoundingBox> {
    bbox.validate(width, height)?;
    let mut draw = || rng.random_range(PERTURB_MIN..=PERTURB_MAX);
    let (dx1, dy1, dx2, dy2) = (draw(), draw(), draw(), draw());
    Ok(BoundingBox {
        x1: bbox.x1.saturating_sub(dx1),
        y1: bbox.y1.saturating_sub(dy1),
        x2: (bbox.x2 + dx2).min(width as u32),
        y2: (bbox.y2 + dy2).min(height as u32),
    })
}

/// Uniformly random foreground pixel.
pub fn sample_point(mask: &BinaryMask, rng: &mut impl Rng) -> Result<Point> {
    let count = mask.count();
    if count == 0 {
        return Err(Error::Prompt("cannot sample a point from an empty mask".into()));
    }
    let k = rng.random_range(0..count);
    Ok(mask.foreground().nth(k).expect("k < foreground count"))
}
