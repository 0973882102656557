//! Experiment configuration.
//!
//! One flat record owns every architectural and training hyperparameter, so
//! an ablation is nothing more than a sweep over a single field. Configs are
//! read from TOML; unknown keys are rejected.

use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::Tokenizer;

/// Which token of the final text-encoder layer is projected into the shared
/// embedding space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextPooling {
    /// The last slot of the padded sequence (the end-of-sequence token).
    Eos,
    /// The first fixed slot (the class token).
    First,
}

/// Linear projections inside an attention block that may carry a LoRA pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Q,
    K,
    V,
    Out,
}

/// Sub-networks whose attention layers may be LoRA-wrapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraScope {
    ImageEncoder,
    MaskDecoder,
}

/// Geometric prompts fed back during refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementPrompts {
    /// No geometric prompts; refinement is disabled regardless of iteration count.
    None,
    /// Tight box of the previous prediction plus `n` points drawn uniformly
    /// from its foreground.
    BoxRandom(usize),
    /// `n` random foreground points, no box.
    Random(usize),
    /// Tight box plus the (snapped) centroid of the previous prediction.
    BoxCentroid,
}

impl RefinementPrompts {
    pub fn label(&self) -> String {
        match self {
            RefinementPrompts::None => "none".to_string(),
            RefinementPrompts::BoxRandom(n) => format!("box+{n}random"),
            RefinementPrompts::Random(n) => format!("{n}random"),
            RefinementPrompts::BoxCentroid => "box+centroid".to_string(),
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        let s = label.trim().to_ascii_lowercase();
        if s == "none" {
            return Ok(RefinementPrompts::None);
        }
        if s == "box+centroid" {
            return Ok(RefinementPrompts::BoxCentroid);
        }
        let parse_n = |t: &str| -> Result<usize> {
            let digits = t.strip_suffix("random").unwrap_or("");
            digits
                .parse::<usize>()
                .ok()
                .filter(|n| *n >= 1)
                .ok_or_else(|| Error::config("refinement_prompts", format!("unrecognized `{label}`")))
        };
        if let Some(rest) = s.strip_prefix("box+") {
            return Ok(RefinementPrompts::BoxRandom(parse_n(rest)?));
        }
        Ok(RefinementPrompts::Random(parse_n(&s)?))
    }

    pub fn uses_box(&self) -> bool {
        matches!(self, RefinementPrompts::BoxRandom(_) | RefinementPrompts::BoxCentroid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    // image encoder
    pub image_size: usize,
    pub patch_size: usize,
    pub img_layers: usize,
    pub img_heads: usize,
    pub img_dim: usize,
    pub img_mlp_ratio: usize,

    // text encoder
    pub txt_layers: usize,
    pub txt_heads: usize,
    pub txt_dim: usize,
    pub txt_mlp_ratio: usize,
    pub context_length: usize,
    pub context_tokens: usize,
    pub prompt_depth: usize,
    pub shared_prompt_bank: bool,
    pub text_pooling: TextPooling,
    pub text_proj_trainable: bool,
    pub class_name: String,
    pub prompt_template: String,

    // text -> prompt adapter
    pub embed_dim: usize,
    pub adapter_hidden: usize,
    pub prompt_dim: usize,

    // mask decoder
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub dec_mlp_dim: usize,
    pub cross_attn_downsample: usize,
    pub upscale_factor: usize,
    pub dense_summary: bool,
    pub no_mask_bias: bool,

    // low-rank adaptation
    pub lora_rank: usize,
    pub lora_projections: Vec<Projection>,
    pub lora_scopes: Vec<LoraScope>,

    // refinement
    pub refinement_iters: usize,
    pub refinement_prompts: RefinementPrompts,
    pub accumulate_prompts: bool,
    pub train_through_refinement: bool,

    // optimization
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,

    // evaluation
    pub nsd_tolerance: f64,

    pub seed: u64,
}

impl Default for ExperimentConfig {
    /// Full-scale geometry: ViT-B image encoder, 12-layer 768-wide text encoder,
    /// 256-slot context, SAM-sized decoder.
    fn default() -> Self {
        Self {
            image_size: 1024,
            patch_size: 16,
            img_layers: 12,
            img_heads: 12,
            img_dim: 768,
            img_mlp_ratio: 4,
            txt_layers: 12,
            txt_heads: 12,
            txt_dim: 768,
            txt_mlp_ratio: 4,
            context_length: 256,
            context_tokens: 4,
            prompt_depth: 12,
            shared_prompt_bank: false,
            text_pooling: TextPooling::Eos,
            text_proj_trainable: false,
            class_name: "tumor".to_string(),
            prompt_template: "an ultrasound image of a {}".to_string(),
            embed_dim: 512,
            adapter_hidden: 512,
            prompt_dim: 256,
            dec_layers: 2,
            dec_heads: 8,
            dec_mlp_dim: 2048,
            cross_attn_downsample: 2,
            upscale_factor: 4,
            dense_summary: true,
            no_mask_bias: true,
            lora_rank: 16,
            lora_projections: vec![Projection::Q, Projection::V],
            lora_scopes: vec![LoraScope::ImageEncoder, LoraScope::MaskDecoder],
            refinement_iters: 2,
            refinement_prompts: RefinementPrompts::BoxCentroid,
            accumulate_prompts: false,
            train_through_refinement: false,
            lr: 1e-3,
            weight_decay: 0.01,
            epochs: 5,
            batch_size: 1,
            nsd_tolerance: 3.0,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale configuration trainable on a CPU in minutes: 128 px input,
    /// a small ViT, and a 12-layer narrow text encoder so every prompt depth
    /// of the ablation grid is reachable.
    pub fn desk() -> Self {
        Self {
            image_size: 128,
            patch_size: 16,
            img_layers: 2,
            img_heads: 4,
            img_dim: 64,
            txt_layers: 12,
            txt_heads: 2,
            txt_dim: 32,
            context_length: 24,
            embed_dim: 64,
            adapter_hidden: 64,
            prompt_dim: 64,
            dec_heads: 4,
            dec_mlp_dim: 128,
            train_through_refinement: true,
            ..Self::default()
        }
    }

    /// Smallest useful configuration: 32 px input, used for float64 gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            img_layers: 1,
            img_heads: 2,
            img_dim: 16,
            img_mlp_ratio: 2,
            txt_layers: 3,
            txt_heads: 2,
            txt_dim: 16,
            txt_mlp_ratio: 2,
            context_length: 16,
            context_tokens: 2,
            prompt_depth: 2,
            embed_dim: 16,
            adapter_hidden: 16,
            prompt_dim: 16,
            dec_layers: 1,
            dec_heads: 2,
            dec_mlp_dim: 32,
            upscale_factor: 2,
            lora_rank: 2,
            refinement_iters: 1,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::load(path, format!("cannot read config: {e}")))?;
        Self::from_toml_str(&text)
    }

    /// Applies the `PROMPTSEG_SEED` environment override, the only config
    /// field that may come from the environment.
    pub fn with_env_overrides(mut self) -> Result<Self> {
        if let Ok(value) = std::env::var(SEED_ENV) {
            self.seed = value
                .trim()
                .parse()
                .map_err(|_| Error::config("seed", format!("{SEED_ENV}=`{value}` is not a u64")))?;
        }
        Ok(self)
    }

    pub fn validate(self) -> Result<ValidatedConfig> {
        ValidatedConfig::new(self)
    }
}

pub const SEED_ENV: &str = "PROMPTSEG_SEED";
pub const OUT_DIR_ENV: &str = "PROMPTSEG_OUT";

/// A configuration whose invariants have been checked, with derived sizes frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig {
    inner: ExperimentConfig,
    grid_side: usize,
    fixed_slots: usize,
}

impl Deref for ValidatedConfig {
    type Target = ExperimentConfig;

    fn deref(&self) -> &ExperimentConfig {
        &self.inner
    }
}

fn positive(field: &'static str, value: usize) -> Result<()> {
    if value == 0 {
        Err(Error::config(field, "must be at least 1"))
    } else {
        Ok(())
    }
}

fn divisible(field: &'static str, value: usize, by: usize, what: &str) -> Result<()> {
    if value % by != 0 {
        Err(Error::config(field, format!("{value} not divisible by {what} {by}")))
    } else {
        Ok(())
    }
}

impl ValidatedConfig {
    fn new(c: ExperimentConfig) -> Result<Self> {
        positive("image_size", c.image_size)?;
        positive("patch_size", c.patch_size)?;
        divisible("image_size", c.image_size, c.patch_size, "patch_size")?;
        for (field, value) in [
            ("img_layers", c.img_layers),
            ("img_heads", c.img_heads),
            ("img_dim", c.img_dim),
            ("img_mlp_ratio", c.img_mlp_ratio),
            ("txt_layers", c.txt_layers),
            ("txt_heads", c.txt_heads),
            ("txt_dim", c.txt_dim),
            ("txt_mlp_ratio", c.txt_mlp_ratio),
            ("context_length", c.context_length),
            ("embed_dim", c.embed_dim),
            ("prompt_dim", c.prompt_dim),
            ("dec_heads", c.dec_heads),
            ("dec_mlp_dim", c.dec_mlp_dim),
            ("cross_attn_downsample", c.cross_attn_downsample),
            ("upscale_factor", c.upscale_factor),
            ("batch_size", c.batch_size),
        ] {
            positive(field, value)?;
        }
        divisible("img_dim", c.img_dim, c.img_heads, "img_heads")?;
        divisible("txt_dim", c.txt_dim, c.txt_heads, "txt_heads")?;
        divisible("prompt_dim", c.prompt_dim, c.dec_heads, "dec_heads")?;
        divisible("prompt_dim", c.prompt_dim, 2, "two (Fourier sin/cos pairs)")?;
        let cross = c.prompt_dim / c.cross_attn_downsample;
        if cross == 0 || c.prompt_dim % c.cross_attn_downsample != 0 {
            return Err(Error::config(
                "cross_attn_downsample",
                format!("prompt_dim {} not divisible by {}", c.prompt_dim, c.cross_attn_downsample),
            ));
        }
        divisible("prompt_dim", cross, c.dec_heads, "dec_heads after cross-attention downsampling")?;
        if c.prompt_dim < 8 || c.prompt_dim % 8 != 0 {
            return Err(Error::config("prompt_dim", "must be a positive multiple of 8"));
        }
        if c.prompt_depth < 1 {
            return Err(Error::config("prompt_depth", "prompt_depth below 1"));
        }
        if c.prompt_depth > c.txt_layers {
            return Err(Error::config(
                "prompt_depth",
                format!("prompt_depth {} exceeds txt_layers {}", c.prompt_depth, c.txt_layers),
            ));
        }
        if c.lora_rank < 1 {
            return Err(Error::config("lora_rank", "lora_rank below 1"));
        }
        if c.adapter_hidden != c.embed_dim {
            return Err(Error::config(
                "adapter_hidden",
                format!("must equal embed_dim ({} != {})", c.adapter_hidden, c.embed_dim),
            ));
        }
        if c.class_name.trim().is_empty() {
            return Err(Error::config("class_name", "empty"));
        }
        if !c.prompt_template.contains("{}") {
            return Err(Error::config("prompt_template", "must contain a `{}` class placeholder"));
        }
        if !(c.lr.is_finite() && c.lr > 0.0) {
            return Err(Error::config("lr", "must be positive and finite"));
        }
        if !(c.weight_decay.is_finite() && c.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative and finite"));
        }
        if !(c.nsd_tolerance.is_finite() && c.nsd_tolerance >= 0.0) {
            return Err(Error::config("nsd_tolerance", "must be non-negative and finite"));
        }
        if let RefinementPrompts::BoxRandom(0) | RefinementPrompts::Random(0) = c.refinement_prompts {
            return Err(Error::config("refinement_prompts", "random point count below 1"));
        }

        let fixed_slots = c
            .context_length
            .checked_sub(c.context_tokens)
            .filter(|s| *s > 0)
            .ok_or_else(|| {
                Error::config(
                    "context_tokens",
                    format!(
                        "{} context tokens leave no room in context_length {}",
                        c.context_tokens, c.context_length
                    ),
                )
            })?;
        let needed = Tokenizer::from_template(&c.prompt_template, &c.class_name)
            .template_len();
        if needed > fixed_slots {
            return Err(Error::config(
                "context_tokens",
                format!("template needs {needed} slots but only {fixed_slots} remain"),
            ));
        }

        Ok(Self {
            grid_side: c.image_size / c.patch_size,
            fixed_slots,
            inner: c,
        })
    }

    /// Side length of the square image-feature grid (h = w).
    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    /// Number of non-learnable text slots, S = N − b.
    pub fn fixed_slots(&self) -> usize {
        self.fixed_slots
    }

    /// Number of context banks actually held (1 when a single bank is re-injected).
    pub fn bank_count(&self) -> usize {
        if self.shared_prompt_bank {
            1
        } else {
            self.prompt_depth
        }
    }

    /// Side length of the decoder's low-resolution logit grid.
    pub fn low_res_side(&self) -> usize {
        self.grid_side * self.upscale_factor
    }

    /// Channels of the upscaled per-pixel feature map.
    pub fn upscale_channels(&self) -> usize {
        self.prompt_dim / 8
    }

    pub fn cross_attn_dim(&self) -> usize {
        self.prompt_dim / self.cross_attn_downsample
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.inner
    }

    pub fn into_inner(self) -> ExperimentConfig {
        self.inner
    }

    /// Stable content hash of the configuration.
    pub fn hash(&self) -> String {
        crate::repro::config_hash(&self.inner)
    }

    pub fn lora_applies(&self, scope: LoraScope, proj: Projection) -> bool {
        self.lora_scopes.contains(&scope) && self.lora_projections.contains(&proj)
    }
}
