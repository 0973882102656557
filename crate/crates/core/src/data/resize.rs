//! Letterbox mapping between native frames and the square model input:
//! the longest side is scaled to `image_size`, the rest zero-padded at the
//! bottom/right.

use image::imageops::{self, FilterType};
use image::GrayImage;

use crate::types::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub native_w: usize,
    pub native_h: usize,
    pub target: usize,
    pub scaled_w: usize,
    pub scaled_h: usize,
}

impl Letterbox {
    pub fn new(native_w: usize, native_h: usize, target: usize) -> Self {
        let scale = target as f64 / native_w.max(native_h) as f64;
        let scaled_w = ((native_w as f64 * scale).round() as usize).clamp(1, target);
        let scaled_h = ((native_h as f64 * scale).round() as usize).clamp(1, target);
        Self { native_w, native_h, target, scaled_w, scaled_h }
    }

    fn sx(&self) -> f64 {
        self.scaled_w as f64 / self.native_w as f64
    }

    fn sy(&self) -> f64 {
        self.scaled_h as f64 / self.native_h as f64
    }

    /// Resized, per-image standardized (zero mean, unit variance over the
    /// valid region) input of `target²` values; padding is 0.
    pub fn prepare_image(&self, image: &GrayImage) -> Vec<f32> {
        let resized;
        let src = if (image.width() as usize, image.height() as usize) == (self.scaled_w, self.scaled_h) {
            image
        } else {
            resized = imageops::resize(image, self.scaled_w as u32, self.scaled_h as u32, FilterType::Triangle);
            &resized
        };
        let values: Vec<f64> = src.as_raw().iter().map(|v| *v as f64).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-6);
        let mut out = vec![0.0f32; self.target * self.target];
        for y in 0..self.scaled_h {
            for x in 0..self.scaled_w {
                out[y * self.target + x] = ((values[y * self.scaled_w + x] - mean) / std) as f32;
            }
        }
        out
    }

    /// Nearest-neighbour mask resize into the padded working grid.
    pub fn mask_to_working(&self, mask: &BinaryMask) -> BinaryMask {
        let (sx, sy) = (self.sx(), self.sy());
        BinaryMask::from_fn(self.target, self.target, |x, y| {
            if x >= self.scaled_w || y >= self.scaled_h {
                return false;
            }
            let nx = (((x as f64 + 0.5) / sx) as usize).min(self.native_w - 1);
            let ny = (((y as f64 + 0.5) / sy) as usize).min(self.native_h - 1);
            mask.get(nx, ny)
        })
    }

    /// Crops the valid region of working-resolution logits and resamples it
    /// bilinearly to native size.
    pub fn logits_to_native(&self, logits: &[f32]) -> Vec<f32> {
        assert_eq!(logits.len(), self.target * self.target, "logit grid size");
        if self.scaled_w == self.native_w && self.scaled_h == self.native_h {
            let mut out = Vec::with_capacity(self.native_w * self.native_h);
            for y in 0..self.native_h {
                out.extend_from_slice(&logits[y * self.target..y * self.target + self.native_w]);
            }
            return out;
        }
        let (sx, sy) = (self.sx(), self.sy());
        let at = |x: usize, y: usize| logits[y * self.target + x];
        let mut out = Vec::with_capacity(self.native_w * self.native_h);
        for y in 0..self.native_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.scaled_h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.scaled_h - 1);
            let wy = (fy - y0 as f64) as f32;
            for x in 0..self.native_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.scaled_w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.scaled_w - 1);
                let wx = (fx - x0 as f64) as f32;
                let top = at(x0, y0) * (1.0 - wx) + at(x1, y0) * wx;
                let bottom = at(x0, y1) * (1.0 - wx) + at(x1, y1) * wx;
                out.push(top * (1.0 - wy) + bottom * wy);
            }
        }
        out
    }

    /// Native pixel-space coordinate to working-space coordinate (both continuous).
    pub fn to_working(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.sx(), y * self.sy())
    }

    pub fn to_native(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.sx(), y / self.sy())
    }
}
