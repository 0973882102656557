use candle_core::{IndexOp, Tensor};

use crate::adapter::PromptTokens;
use crate::config::{LoraScope, ValidatedConfig};
use crate::data::Letterbox;
use crate::error::{Error, Result};
use crate::nn::layers::{Attention, LayerNorm, Linear, LoraPlan, Mlp};
use crate::nn::param::{Param, ParamGroup, ParamStore};
use crate::sam::image_encoder::{lora_plan, ImageFeatures};

/// Single-channel mask logits on the square working grid.
#[derive(Debug, Clone)]
pub struct MaskLogits {
    /// `(S, S)`; tracked when produced from trainable parameters.
    pub working: Tensor,
    pub letterbox: Letterbox,
}

impl MaskLogits {
    /// Logits resampled to the native frame, row-major `native_w × native_h`.
    pub fn native(&self) -> Result<Vec<f32>> {
        let v: Vec<f32> = self.working.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1()?;
        Ok(self.letterbox.logits_to_native(&v))
    }
}

/// One block of the two-way transformer: token self-attention, token→image
/// attention, token MLP, image→token attention. Each sub-layer is residual
/// and post-normalized.
#[derive(Debug, Clone)]
pub struct TwoWayBlock {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub token_to_image: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub norm3: LayerNorm,
    pub image_to_token: Attention,
    pub norm4: LayerNorm,
}

impl TwoWayBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &ValidatedConfig, plan: &LoraPlan) -> Result<Self> {
        let m = cfg.prompt_dim;
        let cross = cfg.cross_attn_dim();
        Ok(Self {
            self_attn: Attention::new(store, &format!("{name}.self_attn"), m, m, cfg.dec_heads, plan)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), m)?,
            token_to_image: Attention::new(store, &format!("{name}.t2i"), m, cross, cfg.dec_heads, plan)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), m)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), ParamGroup::Base, m, cfg.dec_mlp_dim, m)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), m)?,
            image_to_token: Attention::new(store, &format!("{name}.i2t"), m, cross, cfg.dec_heads, plan)?,
            norm4: LayerNorm::new(store, &format!("{name}.norm4"), m)?,
        })
    }

    fn forward(&self, queries: &Tensor, keys: &Tensor, query_pe: &Tensor, key_pe: &Tensor) -> Result<(Tensor, Tensor)> {
        let q = (queries + query_pe)?;
        let queries = self.norm1.forward(&(queries + self.self_attn.forward(&q, &q, queries)?)?)?;

        let q = (&queries + query_pe)?;
        let k = (keys + key_pe)?;
        let queries = self.norm2.forward(&(&queries + self.token_to_image.forward(&q, &k, keys)?)?)?;

        let queries = self.norm3.forward(&(&queries + self.mlp.forward(&queries)?)?)?;

        let q = (&queries + query_pe)?;
        let keys = self.norm4.forward(&(keys + self.image_to_token.forward(&k, &q, &queries)?)?)?;
        Ok((queries, keys))
    }
}

/// Bilinear resampling matrix `R` of shape `(out, input)` (half-pixel centres),
/// so that `R · X · Rᵀ` resizes a square grid.
pub fn bilinear_matrix(input: usize, out: usize) -> Vec<f64> {
    let mut r = vec![0.0; out * input];
    let scale = input as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let w = src - i0 as f64;
        r[o * input + i0] += 1.0 - w;
        r[o * input + i1] += w;
    }
    r
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub neck: Linear,
    pub neck_ln: LayerNorm,
    pub output_token: Param,
    pub no_mask_bias: Option<Param>,
    pub blocks: Vec<TwoWayBlock>,
    pub final_attn: Attention,
    pub final_ln: LayerNorm,
    /// Per-token "transposed convolution": `m → u²·c`.
    pub upscale: Linear,
    pub hyper: [Linear; 3],
    upscale_factor: usize,
    channels: usize,
    resample: Tensor,
}

impl MaskDecoder {
    pub fn new(store: &mut ParamStore, cfg: &ValidatedConfig) -> Result<Self> {
        let m = cfg.prompt_dim;
        let c = cfg.upscale_channels();
        let u = cfg.upscale_factor;
        let plan = lora_plan(cfg, LoraScope::MaskDecoder);
        let blocks = (0..cfg.dec_layers)
            .map(|i| TwoWayBlock::new(store, &format!("decoder.block{i}"), cfg, &plan))
            .collect::<Result<Vec<_>>>()?;
        let low = cfg.low_res_side();
        let resample = Tensor::from_vec(bilinear_matrix(low, cfg.image_size), (cfg.image_size, low), store.device())?
            .to_dtype(store.dtype())?;
        Ok(Self {
            neck: Linear::new(store, "decoder.neck", ParamGroup::Base, cfg.img_dim, m, false)?,
            neck_ln: LayerNorm::new(store, "decoder.neck_ln", m)?,
            output_token: store.normal("decoder.output_token", ParamGroup::PromptEmbedding, (1, m), 0.02)?,
            no_mask_bias: if cfg.no_mask_bias {
                Some(store.zeros("decoder.no_mask_bias", ParamGroup::PromptEmbedding, (m,))?)
            } else {
                None
            },
            blocks,
            final_attn: Attention::new(store, "decoder.final_attn", m, cfg.cross_attn_dim(), cfg.dec_heads, &plan)?,
            final_ln: LayerNorm::new(store, "decoder.final_ln", m)?,
            upscale: Linear::new(store, "decoder.upscale", ParamGroup::Base, m, u * u * c, true)?,
            hyper: [
                Linear::new(store, "decoder.hyper0", ParamGroup::Base, m, m, true)?,
                Linear::new(store, "decoder.hyper1", ParamGroup::Base, m, m, true)?,
                Linear::new(store, "decoder.hyper2", ParamGroup::Base, m, c, true)?,
            ],
            upscale_factor: u,
            channels: c,
            resample,
        })
    }

    /// Image tokens projected to the decoder width, before prompt conditioning.
    pub fn image_embedding(&self, features: &ImageFeatures) -> Result<Tensor> {
        let src = self.neck_ln.forward(&self.neck.forward(&features.grid)?)?;
        Ok(match &self.no_mask_bias {
            Some(b) => src.broadcast_add(&b.tensor())?,
            None => src,
        })
    }

    /// `image_pe` is the `(h·w, m)` positional encoding of the feature grid.
    pub fn decode(&self, features: &ImageFeatures, image_pe: &Tensor, prompts: &PromptTokens) -> Result<MaskLogits> {
        let m = self.output_token.shape().dims()[1];
        if prompts.tokens.dim(1)? != m {
            return Err(Error::Shape(format!("prompt tokens have width {}, decoder expects {m}", prompts.tokens.dim(1)?)));
        }
        let tokens = Tensor::cat(&[self.output_token.tensor(), prompts.tokens.clone()], 0)?;
        let mut queries = tokens.clone();
        let mut keys = self.image_embedding(features)?;
        for b in &self.blocks {
            (queries, keys) = b.forward(&queries, &keys, &tokens, image_pe)?;
        }
        let q = (&queries + &tokens)?;
        let k = (&keys + image_pe)?;
        let queries = self.final_ln.forward(&(&queries + self.final_attn.forward(&q, &k, &keys)?)?)?;

        let g = features.side;
        let (u, c) = (self.upscale_factor, self.channels);
        let low = g * u;
        let pixels = self
            .upscale
            .forward(&keys)?
            .gelu_erf()?
            .reshape((g, g, u, u, c))?
            .permute((0, 2, 1, 3, 4))?
            .contiguous()?
            .reshape((low * low, c))?;
        let mut h = queries.i(0..1)?;
        for (i, l) in self.hyper.iter().enumerate() {
            h = l.forward(&h)?;
            if i < 2 {
                h = h.relu()?;
            }
        }
        let low_logits = pixels.matmul(&h.t()?)?.reshape((low, low))?;
        let working = self.resample.matmul(&low_logits)?.matmul(&self.resample.t()?)?;
        Ok(MaskLogits { working, letterbox: features.letterbox })
    }
}
