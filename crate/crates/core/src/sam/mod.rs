//! Promptable segmenter: ViT image encoder, geometric prompt encoder and a
//! two-way transformer mask decoder, wired together with the text branch.

pub mod image_encoder;
pub mod mask_decoder;
pub mod prompt_encoder;

use candle_core::{DType, Tensor};
use image::GrayImage;

pub use image_encoder::{ImageEncoder, ImageFeatures};
pub use mask_decoder::{MaskDecoder, MaskLogits};
pub use prompt_encoder::{denormalize, normalized_coords, FourierEncoding, GeometricPrompt, PromptEncoder};

use crate::adapter::{assemble_prompts, DenseSummary, GeometricTokens, TextAdapter};
use crate::config::ValidatedConfig;
use crate::data::Letterbox;
use crate::error::Result;
use crate::nn::lora::freeze_base;
use crate::nn::param::ParamStore;
use crate::repro::seed_all;
use crate::text::{build_sequence, ContextPromptBank, TextEncoder, TokenSequence};
use crate::types::BinaryMask;

/// Foreground where `logit > threshold`.
pub fn binarize(logits: &[f32], width: usize, height: usize, threshold: f32) -> BinaryMask {
    assert_eq!(logits.len(), width * height, "logit count");
    BinaryMask::from_fn(width, height, |x, y| logits[y * width + x] > threshold)
}

/// Prompt tokens that do not depend on geometric prompts.
#[derive(Debug, Clone)]
pub struct BasePrompts {
    /// `(1, m)`.
    pub text: Tensor,
    /// `(1, m)` when the dense summary is enabled.
    pub dense: Option<Tensor>,
}

/// The whole model. Every parameter lives in `store`; frozen weights are a
/// deterministic function of the configured seed.
#[derive(Debug, Clone)]
pub struct SegModel {
    cfg: ValidatedConfig,
    pub store: ParamStore,
    pub image_encoder: ImageEncoder,
    pub prompt_encoder: PromptEncoder,
    pub decoder: MaskDecoder,
    pub text_encoder: TextEncoder,
    pub context: ContextPromptBank,
    pub adapter: TextAdapter,
    pub dense: Option<DenseSummary>,
    pub sequence: TokenSequence,
    image_pe: Tensor,
}

impl SegModel {
    pub fn new(cfg: &ValidatedConfig, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(seed_all(cfg.seed), dtype);
        let image_encoder = ImageEncoder::new(&mut store, cfg)?;
        let prompt_encoder = PromptEncoder::new(&mut store, cfg.prompt_dim)?;
        let decoder = MaskDecoder::new(&mut store, cfg)?;
        let text_encoder = TextEncoder::new(&mut store, cfg)?;
        let context = ContextPromptBank::new(&mut store, cfg.context_tokens, cfg.txt_dim, cfg.prompt_depth, cfg.shared_prompt_bank)?;
        let adapter = TextAdapter::new(&mut store, cfg.adapter_hidden, cfg.prompt_dim)?;
        let dense = if cfg.dense_summary {
            Some(DenseSummary::new(&mut store, cfg.img_dim, cfg.prompt_dim)?)
        } else {
            None
        };
        let sequence = build_sequence(&cfg.class_name, &cfg.prompt_template, cfg.context_length, cfg.context_tokens)?;
        freeze_base(&store, cfg.text_proj_trainable);
        let image_pe = prompt_encoder.pe.grid(cfg.grid_side())?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            image_encoder,
            prompt_encoder,
            decoder,
            text_encoder,
            context,
            adapter,
            dense,
            sequence,
            image_pe,
        })
    }

    pub fn config(&self) -> &ValidatedConfig {
        &self.cfg
    }

    /// Same parameters (shared, not copied) under a config that differs only
    /// in evaluation-time fields.
    pub fn with_eval_config(&self, cfg: &ValidatedConfig) -> Result<Self> {
        if crate::ablate::training_key(cfg) != crate::ablate::training_key(&self.cfg) {
            return Err(crate::error::Error::Config {
                field: "refinement",
                reason: "config differs in fields that affect training".into(),
            });
        }
        Ok(Self { cfg: cfg.clone(), ..self.clone() })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Letterboxed, standardized `(S, S)` input and its coordinate mapping.
    pub fn prepare(&self, image: &GrayImage) -> Result<(Tensor, Letterbox)> {
        let lb = Letterbox::new(image.width() as usize, image.height() as usize, self.cfg.image_size);
        let s = self.cfg.image_size;
        let t = Tensor::from_vec(lb.prepare_image(image), (s, s), self.store.device())?.to_dtype(self.dtype())?;
        Ok((t, lb))
    }

    pub fn encode_image(&self, image: &GrayImage) -> Result<ImageFeatures> {
        let (t, lb) = self.prepare(image)?;
        self.image_encoder.encode(&t, lb)
    }

    /// Adapted text prompt token, `(1, m)`.
    pub fn text_prompt(&self) -> Result<Tensor> {
        let z = self.text_encoder.encode(&self.context, &self.sequence)?.z;
        Ok(self.adapter.adapt(&z)?.unsqueeze(0)?)
    }

    pub fn base_prompts(&self, text: &Tensor, features: &ImageFeatures) -> Result<BasePrompts> {
        let dense = match &self.dense {
            Some(d) => Some(d.forward(&features.grid)?),
            None => None,
        };
        Ok(BasePrompts { text: text.clone(), dense })
    }

    pub fn encode_geometric(&self, prompts: &[GeometricPrompt], letterbox: &Letterbox) -> Result<GeometricTokens> {
        self.prompt_encoder.encode(prompts, letterbox)
    }

    pub fn decode(&self, features: &ImageFeatures, base: &BasePrompts, geometric: Option<&GeometricTokens>) -> Result<MaskLogits> {
        let prompts = assemble_prompts(&base.text, base.dense.as_ref(), geometric)?;
        self.decoder.decode(features, &self.image_pe, &prompts)
    }

    /// Text-only (plus dense) prediction for one image.
    pub fn segment(&self, image: &GrayImage) -> Result<MaskLogits> {
        let features = self.encode_image(image)?;
        let base = self.base_prompts(&self.text_prompt()?, &features)?;
        self.decode(&features, &base, None)
    }
}

/// Trainable parameter count as an affine law in the LoRA rank, derived from
/// the configuration without building the model: `(intercept, slope)`.
pub fn trainable_law(cfg: &ValidatedConfig) -> (usize, usize) {
    use crate::config::{LoraScope, Projection};
    let m = cfg.prompt_dim;
    let cross = cfg.cross_attn_dim();
    // (dim, internal) of each attention module per scope.
    let image: Vec<(usize, usize)> = vec![(cfg.img_dim, cfg.img_dim); cfg.img_layers];
    let mut decoder: Vec<(usize, usize)> = Vec::new();
    for _ in 0..cfg.dec_layers {
        decoder.extend([(m, m), (m, cross), (m, cross)]);
    }
    decoder.push((m, cross));
    let mut slope = 0;
    for (scope, attns) in [(LoraScope::ImageEncoder, &image), (LoraScope::MaskDecoder, &decoder)] {
        for proj in [Projection::Q, Projection::K, Projection::V, Projection::Out] {
            if cfg.lora_applies(scope, proj) {
                slope += attns.iter().map(|(d, i)| d + i).sum::<usize>();
            }
        }
    }
    let banks = if cfg.context_tokens == 0 {
        0
    } else if cfg.shared_prompt_bank {
        1
    } else {
        cfg.prompt_depth
    };
    let mut intercept = banks * cfg.context_tokens * cfg.txt_dim;
    intercept += cfg.adapter_hidden * m + m + m * m + m;
    intercept += 3 * m + m;
    if cfg.no_mask_bias {
        intercept += m;
    }
    if cfg.dense_summary {
        intercept += cfg.img_dim * m + m;
    }
    if cfg.text_proj_trainable {
        intercept += cfg.txt_dim * cfg.embed_dim;
    }
    (intercept, slope)
}

#[cfg(test)]
mod tests {
    use candle_core::Var;

    use super::*;
    use crate::adapter::PromptTokens;
    use crate::config::ExperimentConfig;
    use crate::nn::param::to_f64_vec;
    use crate::types::{BoundingBox, Point, PromptKind};

    fn tiny() -> ValidatedConfig {
        ExperimentConfig::tiny().validate().unwrap()
    }

    fn phantom(w: u32, h: u32) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| image::Luma([((x * 7 + y * 13) % 251) as u8]))
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn feature_grid_shape() {
        let mut c = ExperimentConfig::desk();
        c.img_dim = 96;
        c.img_heads = 4;
        let model = SegModel::new(&c.validate().unwrap(), DType::F32).unwrap();
        let f = model.encode_image(&phantom(128, 128)).unwrap();
        assert_eq!(f.dims().unwrap(), (8, 8, 96));
        let again = model.encode_image(&phantom(128, 128)).unwrap();
        assert_eq!(max_abs(&f.grid, &again.grid), 0.0);
    }

    #[test]
    fn wrong_input_size_errors() {
        let model = SegModel::new(&tiny(), DType::F32).unwrap();
        let t = Tensor::zeros((16, 16), DType::F32, model.store.device()).unwrap();
        assert!(model.image_encoder.encode(&t, Letterbox::new(16, 16, 16)).is_err());
    }

    #[test]
    fn zero_lora_matches_merged_at_init() {
        let cfg = tiny();
        let model = SegModel::new(&cfg, DType::F32).unwrap();
        let img = phantom(40, 32);
        let before = model.encode_image(&img).unwrap();
        let mut merged = model.image_encoder.clone();
        for b in &mut merged.blocks {
            for p in b.attn.projections_mut() {
                if let Some(l) = p.lora_mut() {
                    let plain = l.merge().unwrap();
                    *p = crate::nn::layers::AdaptableLinear::Plain(plain);
                }
            }
        }
        let (t, lb) = model.prepare(&img).unwrap();
        let after = merged.encode(&t, lb).unwrap();
        assert!(max_abs(&before.grid, &after.grid) <= 1e-6);
    }

    #[test]
    fn geometric_token_counts_and_determinism() {
        let model = SegModel::new(&tiny(), DType::F64).unwrap();
        let lb = Letterbox::new(60, 40, 32);
        let pt = GeometricPrompt::Point(Point::new(10, 12));
        let bx = GeometricPrompt::Box(BoundingBox::new(5, 5, 30, 20));
        assert_eq!(model.encode_geometric(&[pt], &lb).unwrap().kinds.len(), 1);
        assert_eq!(model.encode_geometric(&[bx], &lb).unwrap().kinds.len(), 2);
        let both = model.encode_geometric(&[bx, pt], &lb).unwrap();
        assert_eq!(both.kinds, vec![PromptKind::BoxCorner, PromptKind::BoxCorner, PromptKind::Point]);
        assert_eq!(both.tokens.dims(), &[3, 16]);
        let a = model.encode_geometric(&[pt], &lb).unwrap().tokens;
        assert_eq!(max_abs(&a, &model.encode_geometric(&[pt], &lb).unwrap().tokens), 0.0);
        let other = model.encode_geometric(&[GeometricPrompt::Point(Point::new(11, 12))], &lb).unwrap().tokens;
        assert!(max_abs(&a, &other) > 0.0);
    }

    #[test]
    fn out_of_bounds_prompts_error() {
        let model = SegModel::new(&tiny(), DType::F32).unwrap();
        let lb = Letterbox::new(60, 40, 32);
        assert!(model.encode_geometric(&[GeometricPrompt::Point(Point::new(60, 0))], &lb).is_err());
        assert!(model.encode_geometric(&[GeometricPrompt::Box(BoundingBox::new(0, 0, 61, 10))], &lb).is_err());
        assert!(model.encode_geometric(&[GeometricPrompt::Box(BoundingBox::new(4, 0, 4, 10))], &lb).is_err());
    }

    #[test]
    fn box_corners_round_trip_through_normalization() {
        let lb = Letterbox::new(711, 457, 128);
        for b in [BoundingBox::new(0, 0, 711, 457), BoundingBox::new(13, 200, 97, 301), BoundingBox::new(500, 1, 710, 2)] {
            let (coords, _) = normalized_coords(&[GeometricPrompt::Box(b)], &lb).unwrap();
            let (x1, y1) = denormalize(coords[0], &lb);
            let (x2, y2) = denormalize(coords[1], &lb);
            assert_eq!(
                (x1.round() as u32, y1.round() as u32, x2.round() as u32, y2.round() as u32),
                (b.x1, b.y1, b.x2, b.y2)
            );
        }
    }

    #[test]
    fn logits_come_back_at_native_size() {
        let model = SegModel::new(&tiny(), DType::F32).unwrap();
        let logits = model.segment(&phantom(45, 30)).unwrap();
        assert_eq!(logits.working.dims(), &[32, 32]);
        let native = logits.native().unwrap();
        assert_eq!(native.len(), 45 * 30);
        assert!(native.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn every_prompt_token_receives_gradient() {
        let model = SegModel::new(&tiny(), DType::F64).unwrap();
        let f = model.encode_image(&phantom(32, 32)).unwrap();
        let base = model.base_prompts(&model.text_prompt().unwrap(), &f).unwrap();
        let geo = model
            .encode_geometric(&[GeometricPrompt::Box(BoundingBox::new(4, 4, 20, 20)), GeometricPrompt::Point(Point::new(9, 9))], &f.letterbox)
            .unwrap();
        let assembled = assemble_prompts(&base.text, base.dense.as_ref(), Some(&geo)).unwrap();
        let var = Var::from_tensor(&assembled.tokens.detach()).unwrap();
        let prompts = PromptTokens { tokens: var.as_tensor().clone(), kinds: assembled.kinds.clone() };
        let out = model.decoder.decode(&f, &model.image_pe, &prompts).unwrap();
        let loss = out.working.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().abs().unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(g.len(), 5);
        assert!(g.iter().all(|v| *v > 0.0), "{g:?}");
    }

    #[test]
    fn geometric_token_order_does_not_matter() {
        let model = SegModel::new(&tiny(), DType::F64).unwrap();
        let f = model.encode_image(&phantom(32, 32)).unwrap();
        let base = model.base_prompts(&model.text_prompt().unwrap(), &f).unwrap();
        let b = GeometricPrompt::Box(BoundingBox::new(4, 4, 20, 20));
        let p = GeometricPrompt::Point(Point::new(9, 9));
        let g1 = model.encode_geometric(&[b, p], &f.letterbox).unwrap();
        let g2 = model.encode_geometric(&[p, b], &f.letterbox).unwrap();
        let y1 = model.decode(&f, &base, Some(&g1)).unwrap().working;
        let y2 = model.decode(&f, &base, Some(&g2)).unwrap().working;
        assert!(max_abs(&y1, &y2) <= 1e-5);
    }

    #[test]
    fn zeroing_text_token_changes_logits() {
        let model = SegModel::new(&tiny(), DType::F32).unwrap();
        // move the adapter away from its init so the probe runs on non-default weights
        for p in model.adapter.w2.bias.iter() {
            p.set(&(p.value() + 0.5).unwrap()).unwrap();
        }
        let f = model.encode_image(&phantom(32, 32)).unwrap();
        let base = model.base_prompts(&model.text_prompt().unwrap(), &f).unwrap();
        let zeroed = BasePrompts { text: base.text.zeros_like().unwrap(), dense: base.dense.clone() };
        let a = model.decode(&f, &base, None).unwrap().working;
        let b = model.decode(&f, &zeroed, None).unwrap().working;
        assert!(max_abs(&a, &b) > 0.0);
    }

    #[test]
    fn binarize_thresholds() {
        assert!(binarize(&[-1.0; 6], 3, 2, 0.0).is_empty());
        assert_eq!(binarize(&[1.0; 6], 3, 2, 0.0).count(), 6);
        let logits: Vec<f32> = (0..64).map(|i| ((i * 37) % 64) as f32 / 8.0 - 4.0).collect();
        let mut last = usize::MAX;
        for t in -50..=50 {
            let n = binarize(&logits, 8, 8, t as f32 / 10.0).count();
            assert!(n <= last);
            last = n;
        }
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        let r = mask_decoder::bilinear_matrix(8, 32);
        for row in r.chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let id = mask_decoder::bilinear_matrix(5, 5);
        for (i, row) in id.chunks(5).enumerate() {
            assert_eq!(row[i], 1.0);
        }
    }

    #[test]
    fn full_frame_tensors_are_finite() {
        let model = SegModel::new(&tiny(), DType::F32).unwrap();
        let v = to_f64_vec(&model.segment(&phantom(32, 32)).unwrap().working).unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn trainable_law_matches_built_models() {
        use crate::config::{ExperimentConfig, LoraScope, Projection};
        use crate::nn::lora::count_trainable;
        let variants = [
            ExperimentConfig::tiny(),
            ExperimentConfig { lora_rank: 3, shared_prompt_bank: true, ..ExperimentConfig::tiny() },
            ExperimentConfig {
                lora_projections: vec![Projection::Q, Projection::K, Projection::V, Projection::Out],
                lora_scopes: vec![LoraScope::MaskDecoder],
                text_proj_trainable: true,
                dense_summary: false,
                no_mask_bias: false,
                ..ExperimentConfig::tiny()
            },
            ExperimentConfig { lora_rank: 1, context_tokens: 0, ..ExperimentConfig::tiny() },
        ];
        for c in variants {
            let cfg = c.validate().unwrap();
            let (a, b) = trainable_law(&cfg);
            let model = SegModel::new(&cfg, DType::F32).unwrap();
            assert_eq!(count_trainable(&model.store).trainable, a + b * cfg.lora_rank);
        }
    }
}
