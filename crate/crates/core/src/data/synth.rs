//! Synthetic speckle phantoms: one persistent ellipse per patient, rendered as
//! a faint bright region under multiplicative speckle.

use std::path::Path;

use image::GrayImage;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::data::dataset::{load_dataset, write_mask, Dataset, PATIENT_PREFIX};
use crate::error::{Error, Result};
use crate::repro::seed_all;
use crate::types::BinaryMask;

/// Ellipse in pixel units, centre `(cx, cy)`, semi-axes `a` (along the rotated
/// x axis) and `b`, rotation `theta` in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Whether the centre of pixel `(x, y)` lies inside (boundary included).
    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    pub fn rasterize(&self, width: usize, height: usize) -> BinaryMask {
        BinaryMask::from_fn(width, height, |x, y| self.contains_pixel(x, y))
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFrame {
    pub patient_id: String,
    pub frame_id: String,
    pub image: GrayImage,
    pub mask: BinaryMask,
    pub ellipse: Ellipse,
}

const BACKGROUND_LEVEL: f64 = 70.0;
const LESION_LEVEL: f64 = 115.0;
const SPECKLE_SHAPE: f64 = 4.0;
const AXIS_JITTER: f64 = 0.10;

/// Generates `n_patients × frames_per_patient` frames of `size`×`size` pixels.
pub fn gen_synthetic(n_patients: usize, frames_per_patient: usize, size: usize, seed: u64) -> Result<Vec<SyntheticFrame>> {
    if size < 32 {
        return Err(Error::config("size", format!("synthetic size {size} below 32")));
    }
    let seeds = seed_all(seed);
    let speckle = Gamma::new(SPECKLE_SHAPE, 1.0 / SPECKLE_SHAPE).expect("valid gamma parameters");
    let s = size as f64;
    let mut frames = Vec::with_capacity(n_patients * frames_per_patient);
    for p in 0..n_patients {
        let patient_id = format!("{p:03}");
        let mut rng = seeds.rng(&format!("synthetic/patient/{p}"));
        let base = Ellipse {
            cx: rng.random_range(0.32..0.68) * s,
            cy: rng.random_range(0.32..0.68) * s,
            a: rng.random_range(0.12..0.23) * s,
            b: rng.random_range(0.12..0.23) * s,
            theta: rng.random_range(0.0..std::f64::consts::PI),
        };
        // slow tissue shading shared by all frames of a patient
        let shade_dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for f in 0..frames_per_patient {
            let mut rng = seeds.rng(&format!("synthetic/patient/{p}/frame/{f}"));
            let ellipse = Ellipse {
                a: base.a * (1.0 + rng.random_range(-AXIS_JITTER..=AXIS_JITTER)),
                b: base.b * (1.0 + rng.random_range(-AXIS_JITTER..=AXIS_JITTER)),
                ..base
            };
            let mask = ellipse.rasterize(size, size);
            let mut clean = vec![0.0f64; size * size];
            let (ds, dc) = shade_dir.sin_cos();
            for y in 0..size {
                for x in 0..size {
                    let t = ((x as f64 / s - 0.5) * dc + (y as f64 / s - 0.5) * ds) * 0.4;
                    let level = if mask.get(x, y) { LESION_LEVEL } else { BACKGROUND_LEVEL };
                    clean[y * size + x] = level * (1.0 + t);
                }
            }
            let noisy: Vec<f64> = clean.iter().map(|v| v * speckle.sample(&mut rng)).collect();
            let image = GrayImage::from_fn(size as u32, size as u32, |x, y| {
                // 3x3 box blur gives the speckle a grain instead of white noise
                let (x, y) = (x as i64, y as i64);
                let mut acc = 0.0;
                let mut n = 0.0;
                for yy in (y - 1).max(0)..=(y + 1).min(size as i64 - 1) {
                    for xx in (x - 1).max(0)..=(x + 1).min(size as i64 - 1) {
                        acc += noisy[yy as usize * size + xx as usize];
                        n += 1.0;
                    }
                }
                image::Luma([(acc / n).round().clamp(0.0, 255.0) as u8])
            });
            frames.push(SyntheticFrame {
                patient_id: patient_id.clone(),
                frame_id: format!("frame_{f:04}"),
                image,
                mask,
                ellipse,
            });
        }
    }
    Ok(frames)
}

/// Writes frames in the dataset layout and returns the re-indexed tree.
pub fn write_tree(frames: &[SyntheticFrame], root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    for frame in frames {
        let pdir = root.join(format!("{PATIENT_PREFIX}{}", frame.patient_id));
        let images = pdir.join("images");
        let masks = pdir.join("masks");
        std::fs::create_dir_all(&images)?;
        std::fs::create_dir_all(&masks)?;
        frame.image.save(images.join(format!("{}.png", frame.frame_id)))?;
        write_mask(&frame.mask, &masks.join(format!("{}.png", frame.frame_id)))?;
    }
    load_dataset(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_size_and_nonempty_masks() {
        let frames = gen_synthetic(4, 50, 128, 7).unwrap();
        assert_eq!(frames.len(), 200);
        assert!(frames.iter().all(|f| !f.mask.is_empty()));
    }

    #[test]
    fn foreground_fraction_in_band() {
        for seed in 0..4 {
            for f in gen_synthetic(6, 20, 128, seed).unwrap() {
                let frac = f.mask.count() as f64 / (128.0 * 128.0);
                assert!((0.02..=0.40).contains(&frac), "fraction {frac}");
            }
        }
        for f in gen_synthetic(4, 5, 32, 3).unwrap() {
            let frac = f.mask.count() as f64 / (32.0 * 32.0);
            assert!((0.02..=0.40).contains(&frac), "fraction {frac}");
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = gen_synthetic(2, 3, 64, 11).unwrap();
        let b = gen_synthetic(2, 3, 64, 11).unwrap();
        let c = gen_synthetic(2, 3, 64, 12).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.as_raw(), y.image.as_raw());
            assert_eq!(x.mask, y.mask);
        }
        assert_ne!(a[0].image.as_raw(), c[0].image.as_raw());
    }

    #[test]
    fn mask_is_exact_ellipse_interior() {
        for f in gen_synthetic(3, 4, 96, 5).unwrap() {
            let e = f.ellipse;
            for y in 0..96 {
                for x in 0..96 {
                    // independent form of the inequality via the rotated quadratic
                    let px = x as f64 + 0.5 - e.cx;
                    let py = y as f64 + 0.5 - e.cy;
                    let (s, c) = e.theta.sin_cos();
                    let qa = c * c / (e.a * e.a) + s * s / (e.b * e.b);
                    let qb = 2.0 * c * s * (1.0 / (e.a * e.a) - 1.0 / (e.b * e.b));
                    let qc = s * s / (e.a * e.a) + c * c / (e.b * e.b);
                    let q = qa * px * px + qb * px * py + qc * py * py;
                    if (q - 1.0).abs() > 1e-9 {
                        assert_eq!(f.mask.get(x, y), q < 1.0, "pixel ({x},{y})");
                    }
                }
            }
        }
    }

    #[test]
    fn lesion_is_brighter_on_average() {
        let f = &gen_synthetic(1, 1, 128, 2).unwrap()[0];
        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for y in 0..128 {
            for x in 0..128 {
                let v = f.image.get_pixel(x as u32, y as u32)[0] as f64;
                if f.mask.get(x, y) {
                    fg += v;
                    nf += 1.0;
                } else {
                    bg += v;
                    nb += 1.0;
                }
            }
        }
        assert!(fg / nf > bg / nb * 1.2);
    }

    #[test]
    fn written_tree_reloads_identically() {
        let frames = gen_synthetic(2, 3, 48, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ds = write_tree(&frames, dir.path()).unwrap();
        assert_eq!(ds.samples.len(), 6);
        for (entry, frame) in ds.samples.iter().zip(&frames) {
            assert_eq!(entry.patient_id, frame.patient_id);
            assert_eq!(entry.frame_id, frame.frame_id);
            assert_eq!(entry.load_image().unwrap().pixels.as_raw(), frame.image.as_raw());
            assert_eq!(entry.load_mask().unwrap(), frame.mask);
        }
    }
}
