use candle_core::Tensor;

use crate::config::{LoraScope, Projection, ValidatedConfig};
use crate::data::Letterbox;
use crate::error::{Error, Result};
use crate::nn::layers::{LayerNorm, Linear, LoraPlan, TransformerBlock};
use crate::nn::param::{Param, ParamGroup, ParamStore};

/// Patch-token features of one image.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    /// `(h·w, d)`, row-major over the patch grid.
    pub grid: Tensor,
    pub side: usize,
    /// Native size and the native ↔ working mapping.
    pub letterbox: Letterbox,
}

impl ImageFeatures {
    /// `(h, w, d)`.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        Ok((self.side, self.side, self.grid.dim(1)?))
    }

    pub fn source_size(&self) -> (usize, usize) {
        (self.letterbox.native_w, self.letterbox.native_h)
    }
}

pub(crate) fn lora_plan(cfg: &ValidatedConfig, scope: LoraScope) -> LoraPlan {
    let projections: Vec<Projection> =
        [Projection::Q, Projection::K, Projection::V, Projection::Out].into_iter().filter(|p| cfg.lora_applies(scope, *p)).collect();
    LoraPlan { rank: cfg.lora_rank, projections }
}

/// Patchify → linear patch embedding → position embedding → pre-norm ViT blocks.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub patch_embed: Linear,
    pub pos_embed: Param,
    pub blocks: Vec<TransformerBlock>,
    pub final_ln: LayerNorm,
    image_size: usize,
    patch: usize,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ValidatedConfig) -> Result<Self> {
        let p = cfg.patch_size;
        let g = cfg.grid_side();
        let plan = lora_plan(cfg, LoraScope::ImageEncoder);
        let patch_embed = Linear::new(store, "image.patch_embed", ParamGroup::Base, p * p, cfg.img_dim, true)?;
        let pos_embed = store.normal("image.pos_embed", ParamGroup::Base, (g * g, cfg.img_dim), 0.02)?;
        let blocks = (0..cfg.img_layers)
            .map(|i| TransformerBlock::new(store, &format!("image.block{i}"), cfg.img_dim, cfg.img_heads, cfg.img_mlp_ratio, &plan))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNorm::new(store, "image.final_ln", cfg.img_dim)?;
        Ok(Self { patch_embed, pos_embed, blocks, final_ln, image_size: cfg.image_size, patch: p })
    }

    /// `(S, S)` → `(g², p²)` with patches and pixels both row-major.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let (s, p) = (self.image_size, self.patch);
        let g = s / p;
        Ok(image.reshape((g, p, g, p))?.permute((0, 2, 1, 3))?.contiguous()?.reshape((g * g, p * p))?)
    }

    /// `image` is the standardized, letterboxed `(S, S)` working image.
    pub fn encode(&self, image: &Tensor, letterbox: Letterbox) -> Result<ImageFeatures> {
        if image.dims() != [self.image_size, self.image_size] {
            return Err(Error::Shape(format!(
                "image encoder expects {0}×{0}, got {1:?}",
                self.image_size,
                image.dims()
            )));
        }
        let mut x = self.patch_embed.forward(&self.patchify(image)?)?.broadcast_add(&self.pos_embed.tensor())?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        Ok(ImageFeatures { grid: self.final_ln.forward(&x)?, side: self.image_size / self.patch, letterbox })
    }
}
