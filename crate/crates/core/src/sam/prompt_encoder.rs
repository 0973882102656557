use candle_core::{DType, Tensor};

use crate::adapter::GeometricTokens;
use crate::data::Letterbox;
use crate::error::{Error, Result};
use crate::nn::param::{Param, ParamGroup, ParamStore};
use crate::types::{BoundingBox, Point, PromptKind};

/// A foreground point or a box, in native pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometricPrompt {
    Point(Point),
    Box(BoundingBox),
}

impl GeometricPrompt {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        match self {
            GeometricPrompt::Point(p) => {
                if p.x as usize >= width || p.y as usize >= height {
                    return Err(Error::Prompt(format!("point ({}, {}) outside {width}×{height} image", p.x, p.y)));
                }
                Ok(())
            }
            GeometricPrompt::Box(b) => b.validate(width, height),
        }
    }

    pub fn token_count(&self) -> usize {
        match self {
            GeometricPrompt::Point(_) => 1,
            GeometricPrompt::Box(_) => 2,
        }
    }
}

/// Random Fourier features of 2-D coordinates in `[0, 1]²`:
/// `[sin(2π (2c − 1) G), cos(2π (2c − 1) G)]` with a frozen Gaussian `G`.
#[derive(Debug, Clone)]
pub struct FourierEncoding {
    pub gaussian: Param,
}

impl FourierEncoding {
    pub fn new(store: &mut ParamStore, dim: usize) -> Result<Self> {
        Ok(Self { gaussian: store.normal("prompt.fourier", ParamGroup::Base, (2, dim / 2), 1.0)? })
    }

    /// `coords` is `(n, 2)` holding `(x, y)`; returns `(n, dim)`.
    pub fn encode(&self, coords: &Tensor) -> Result<Tensor> {
        let c = ((coords * 2.0)? - 1.0)?;
        let proj = (c.matmul(&self.gaussian.tensor())? * (2.0 * std::f64::consts::PI))?;
        Ok(Tensor::cat(&[proj.sin()?, proj.cos()?], 1)?)
    }

    /// Encoding of every cell centre of a `side × side` grid, row-major.
    pub fn grid(&self, side: usize) -> Result<Tensor> {
        let centre = |i: usize| (i as f64 + 0.5) / side as f64;
        let coords: Vec<[f64; 2]> = (0..side * side).map(|k| [centre(k % side), centre(k / side)]).collect();
        let g = self.gaussian.value();
        self.encode(&coords_tensor(&coords, g.dtype(), g.device())?)
    }
}

#[derive(Debug, Clone)]
pub struct PromptEncoder {
    pub pe: FourierEncoding,
    pub point_embed: Param,
    pub corner1_embed: Param,
    pub corner2_embed: Param,
}

/// Normalized encoder inputs of a prompt list, before Fourier features.
pub fn normalized_coords(prompts: &[GeometricPrompt], letterbox: &Letterbox) -> Result<(Vec<[f64; 2]>, Vec<PromptKind>)> {
    let s = letterbox.target as f64;
    let norm = |x: f64, y: f64| {
        let (wx, wy) = letterbox.to_working(x, y);
        [wx / s, wy / s]
    };
    let mut coords = Vec::new();
    let mut kinds = Vec::new();
    for p in prompts {
        p.validate(letterbox.native_w, letterbox.native_h)?;
        match p {
            GeometricPrompt::Point(pt) => {
                coords.push(norm(pt.x as f64 + 0.5, pt.y as f64 + 0.5));
                kinds.push(PromptKind::Point);
            }
            GeometricPrompt::Box(b) => {
                coords.push(norm(b.x1 as f64, b.y1 as f64));
                coords.push(norm(b.x2 as f64, b.y2 as f64));
                kinds.extend([PromptKind::BoxCorner, PromptKind::BoxCorner]);
            }
        }
    }
    Ok((coords, kinds))
}

/// Inverse of the normalization in [`normalized_coords`], back to native pixels.
pub fn denormalize(coord: [f64; 2], letterbox: &Letterbox) -> (f64, f64) {
    let s = letterbox.target as f64;
    letterbox.to_native(coord[0] * s, coord[1] * s)
}

impl PromptEncoder {
    pub fn new(store: &mut ParamStore, dim: usize) -> Result<Self> {
        Ok(Self {
            pe: FourierEncoding::new(store, dim)?,
            point_embed: store.normal("prompt.point_embed", ParamGroup::PromptEmbedding, (1, dim), 0.02)?,
            corner1_embed: store.normal("prompt.corner1_embed", ParamGroup::PromptEmbedding, (1, dim), 0.02)?,
            corner2_embed: store.normal("prompt.corner2_embed", ParamGroup::PromptEmbedding, (1, dim), 0.02)?,
        })
    }

    /// One token per point, two per box, in input order.
    pub fn encode(&self, prompts: &[GeometricPrompt], letterbox: &Letterbox) -> Result<GeometricTokens> {
        let (coords, kinds) = normalized_coords(prompts, letterbox)?;
        let value = self.point_embed.value();
        let dim = value.dim(1)?;
        if coords.is_empty() {
            return Ok(GeometricTokens { tokens: Tensor::zeros((0, dim), value.dtype(), value.device())?, kinds });
        }
        let pe = self.pe.encode(&coords_tensor(&coords, value.dtype(), value.device())?)?;
        let mut type_rows = Vec::with_capacity(kinds.len());
        let mut corner = 0;
        for k in &kinds {
            type_rows.push(match k {
                PromptKind::Point => self.point_embed.tensor(),
                _ => {
                    corner += 1;
                    if corner % 2 == 1 {
                        self.corner1_embed.tensor()
                    } else {
                        self.corner2_embed.tensor()
                    }
                }
            });
        }
        let tokens = (pe + Tensor::cat(&type_rows, 0)?)?;
        Ok(GeometricTokens { tokens, kinds })
    }
}

fn coords_tensor(coords: &[[f64; 2]], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let flat: Vec<f64> = coords.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (coords.len(), 2), device)?.to_dtype(dtype)?)
}
