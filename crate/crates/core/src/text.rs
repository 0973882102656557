//! Transformer text encoder with deep learnable context prompts.
//!
//! The input sequence is `[b context slots | S fixed slots]`. For each of the
//! first `t` layers the context slots entering the layer are overwritten by a
//! fresh learnable bank, so whatever the previous layer wrote there is
//! discarded. Layers after `t` propagate those slots like any other token.
//! The final-layer representation of the pooled token is projected into the
//! shared embedding space.

use std::collections::BTreeMap;

use candle_core::{IndexOp, Tensor};

use crate::config::{TextPooling, ValidatedConfig};
use crate::error::{Error, Result};
use crate::nn::layers::{LayerNorm, Linear, LoraPlan, TransformerBlock};
use crate::nn::param::{Param, ParamGroup, ParamStore};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const EOS: &str = "[EOS]";

/// Std of the Gaussian used to initialize context tokens.
pub const CONTEXT_INIT_STD: f64 = 0.02;

/// Lower-cased whitespace tokenizer whose vocabulary is the special tokens
/// plus the words of the prompt template with the class name filled in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: BTreeMap<String, u32>,
    words: Vec<String>,
}

impl Tokenizer {
    pub fn from_template(template: &str, class_name: &str) -> Self {
        let text = template.replace("{}", class_name);
        let words: Vec<String> = text.split_whitespace().map(|w| w.to_lowercase()).collect();
        let mut vocab = BTreeMap::new();
        for special in [PAD, UNK, CLS, EOS] {
            let id = vocab.len() as u32;
            vocab.insert(special.to_string(), id);
        }
        for w in &words {
            let next = vocab.len() as u32;
            vocab.entry(w.clone()).or_insert(next);
        }
        Self { vocab, words }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.vocab.get(&token.to_lowercase()).copied().unwrap_or(self.vocab[UNK])
    }

    /// `[CLS] words... [EOS]` length.
    pub fn template_len(&self) -> usize {
        self.words.len() + 2
    }

    pub fn encode_words(&self) -> Vec<u32> {
        self.words.iter().map(|w| self.id(w)).collect()
    }
}

/// Token ids of one padded sequence. Context slots carry the `[PAD]` id; their
/// embeddings are always replaced by the context bank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub context_tokens: usize,
    pub eos_index: usize,
    pub class_name: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of fixed (non-context) slots, S.
    pub fn fixed_slots(&self) -> usize {
        self.ids.len() - self.context_tokens
    }
}

/// Lays out `[context | [CLS] template | [PAD]... | [EOS]]` over
/// `context_length` slots. The end-of-sequence token always sits in the last
/// slot.
pub fn build_sequence(class_name: &str, template: &str, context_length: usize, context_tokens: usize) -> Result<TokenSequence> {
    let tok = Tokenizer::from_template(template, class_name);
    let fixed = context_length.saturating_sub(context_tokens);
    if context_tokens >= context_length || tok.template_len() > fixed {
        return Err(Error::Text(format!(
            "template of {} tokens does not fit in {} slots after {} context tokens",
            tok.template_len(),
            context_length,
            context_tokens
        )));
    }
    let mut ids = vec![tok.id(PAD); context_tokens];
    ids.push(tok.id(CLS));
    ids.extend(tok.encode_words());
    ids.resize(context_length - 1, tok.id(PAD));
    ids.push(tok.id(EOS));
    Ok(TokenSequence {
        ids,
        context_tokens,
        eos_index: context_length - 1,
        class_name: class_name.to_string(),
    })
}

/// Learnable context tokens: one `(b, d_t)` bank per injected layer, or a
/// single bank re-injected at every layer in the shared variant.
#[derive(Debug, Clone)]
pub struct ContextPromptBank {
    banks: Vec<Param>,
    depth: usize,
    tokens: usize,
    shared: bool,
}

impl ContextPromptBank {
    pub fn new(store: &mut ParamStore, tokens: usize, width: usize, depth: usize, shared: bool) -> Result<Self> {
        let count = if shared { 1 } else { depth };
        let banks = if tokens == 0 {
            Vec::new()
        } else {
            (0..count)
                .map(|i| store.normal(&format!("text.context_bank.{i}"), ParamGroup::ContextBank, (tokens, width), CONTEXT_INIT_STD))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self { banks, depth, tokens, shared })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn params(&self) -> &[Param] {
        &self.banks
    }

    /// Bank injected in front of layer `layer` (0-based), `None` past the depth.
    pub fn for_layer(&self, layer: usize) -> Option<&Param> {
        if layer >= self.depth {
            return None;
        }
        if self.shared {
            self.banks.first()
        } else {
            self.banks.get(layer)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextEmbedding {
    /// (D,)
    pub z: Tensor,
}

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.z.dims1().unwrap_or(0)
    }
}

/// Hook called with the (1-based) layer index and the activations entering
/// that layer, before context replacement. Returns the activations to use.
pub type LayerHook<'a> = &'a dyn Fn(usize, &Tensor) -> Result<Tensor>;

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub token_embedding: Param,
    pub position_embedding: Param,
    pub layers: Vec<TransformerBlock>,
    pub final_ln: LayerNorm,
    pub projection: Linear,
    pooling: TextPooling,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ValidatedConfig) -> Result<Self> {
        let tok = Tokenizer::from_template(&cfg.prompt_template, &cfg.class_name);
        let token_embedding = store.normal("text.token_embedding", ParamGroup::Base, (tok.vocab_size(), cfg.txt_dim), 0.02)?;
        let position_embedding = store.normal("text.position_embedding", ParamGroup::Base, (cfg.context_length, cfg.txt_dim), 0.02)?;
        let layers = (0..cfg.txt_layers)
            .map(|i| TransformerBlock::new(store, &format!("text.layer{i}"), cfg.txt_dim, cfg.txt_heads, cfg.txt_mlp_ratio, &LoraPlan::none()))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNorm::new(store, "text.final_ln", cfg.txt_dim)?;
        let projection = Linear::new(store, "text.projection", ParamGroup::TextProjection, cfg.txt_dim, cfg.embed_dim, false)?;
        Ok(Self { token_embedding, position_embedding, layers, final_ln, projection, pooling: cfg.text_pooling })
    }

    /// `z = M · w` for the learned projection `M ∈ R^{D×d_t}`.
    pub fn text_proj(&self, w_final: &Tensor) -> Result<Tensor> {
        if w_final.dim(candle_core::D::Minus1)? != self.projection.d_in() {
            return Err(Error::Shape(format!(
                "text_proj expects width {}, got {:?}",
                self.projection.d_in(),
                w_final.dims()
            )));
        }
        self.projection.forward(w_final)
    }

    pub fn encode(&self, bank: &ContextPromptBank, seq: &TokenSequence) -> Result<TextEmbedding> {
        self.encode_with_hook(bank, seq, None)
    }

    pub fn encode_with_hook(&self, bank: &ContextPromptBank, seq: &TokenSequence, hook: Option<LayerHook<'_>>) -> Result<TextEmbedding> {
        let depth = bank.depth();
        if depth < 1 || depth > self.layers.len() {
            return Err(Error::Text(format!("prompt depth {depth} outside 1..={}", self.layers.len())));
        }
        let b = seq.context_tokens;
        if b != bank.tokens() {
            return Err(Error::Text(format!("sequence has {b} context slots but bank has {} tokens", bank.tokens())));
        }
        let n = seq.len();
        if n != self.position_embedding.shape().dims()[0] {
            return Err(Error::Text(format!("sequence length {n} does not match context length")));
        }
        let device = self.token_embedding.value().device().clone();
        let ids = Tensor::new(seq.ids.as_slice(), &device)?;
        let pos = self.position_embedding.tensor();
        let mut h = (self.token_embedding.tensor().index_select(&ids, 0)? + &pos)?;

        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(hook) = hook {
                h = hook(i + 1, &h)?;
            }
            if b > 0 {
                if let Some(p) = bank.for_layer(i) {
                    let mut prompts = p.tensor();
                    if i == 0 {
                        prompts = (prompts + pos.i(0..b)?)?;
                    }
                    h = Tensor::cat(&[&prompts, &h.i(b..n)?], 0)?;
                }
            }
            h = layer.forward(&h)?;
        }
        let h = self.final_ln.forward(&h)?;
        let row = match self.pooling {
            TextPooling::Eos => seq.eos_index,
            TextPooling::First => b,
        };
        let z = self.text_proj(&h.i(row..row + 1)?)?.squeeze(0)?;
        Ok(TextEmbedding { z })
    }
}

#[cfg(test)]
mod tests {
    use candle_core::DType;

    use super::*;
    use crate::config::ExperimentConfig;
    use crate::nn::param::to_f64_vec;
    use crate::repro::seed_all;

    const TEMPLATE: &str = "an ultrasound image of a {}";

    #[test]
    fn full_scale_length_layout() {
        let s = build_sequence("tumor", TEMPLATE, 256, 4).unwrap();
        assert_eq!(s.len(), 256);
        assert_eq!(s.fixed_slots(), 252);
        assert_eq!(s.eos_index, 255);
        let tok = Tokenizer::from_template(TEMPLATE, "tumor");
        assert_eq!(s.ids[4], tok.id(CLS));
        assert_eq!(s.ids[10], tok.id("tumor"));
        assert_eq!(s.ids[255], tok.id(EOS));
    }

    #[test]
    fn no_context_is_pure_fixed_tokens() {
        let s = build_sequence("tumor", TEMPLATE, 16, 0).unwrap();
        assert_eq!(s.fixed_slots(), 16);
        assert_eq!(s.ids[0], Tokenizer::from_template(TEMPLATE, "tumor").id(CLS));
    }

    #[test]
    fn full_context_is_rejected() {
        assert!(build_sequence("tumor", TEMPLATE, 16, 16).is_err());
        assert!(build_sequence("tumor", TEMPLATE, 16, 9).is_err());
        build_sequence("tumor", TEMPLATE, 16, 8).unwrap();
    }

    fn tiny() -> (ParamStore, TextEncoder, ContextPromptBank, TokenSequence, ValidatedConfig) {
        let cfg = ExperimentConfig { txt_layers: 4, prompt_depth: 3, ..ExperimentConfig::tiny() }.validate().unwrap();
        let mut store = ParamStore::new(seed_all(1), DType::F64);
        let enc = TextEncoder::new(&mut store, &cfg).unwrap();
        let bank = ContextPromptBank::new(&mut store, cfg.context_tokens, cfg.txt_dim, cfg.prompt_depth, false).unwrap();
        let seq = build_sequence(&cfg.class_name, &cfg.prompt_template, cfg.context_length, cfg.context_tokens).unwrap();
        (store, enc, bank, seq, cfg)
    }

    #[test]
    fn embedding_has_shared_dimension_and_is_deterministic() {
        let (_s, enc, bank, seq, cfg) = tiny();
        let z1 = enc.encode(&bank, &seq).unwrap();
        let z2 = enc.encode(&bank, &seq).unwrap();
        assert_eq!(z1.dim(), cfg.embed_dim);
        assert_eq!(to_f64_vec(&z1.z).unwrap(), to_f64_vec(&z2.z).unwrap());
    }

    #[test]
    fn wrong_bank_depth_or_width_errors() {
        let (_s, enc, _bank, seq, cfg) = tiny();
        let mut other = ParamStore::new(seed_all(2), DType::F64);
        let deep = ContextPromptBank::new(&mut other, cfg.context_tokens, cfg.txt_dim, 9, false).unwrap();
        assert!(enc.encode(&deep, &seq).is_err());
    }

    #[test]
    fn text_proj_is_linear_and_identity_padded_case() {
        let (_s, enc, _bank, _seq, cfg) = tiny();
        let dev = candle_core::Device::Cpu;
        let (d_out, d_in) = (cfg.embed_dim, cfg.txt_dim);
        let eye: Vec<f64> = (0..d_out * d_in).map(|k| if k / d_in == k % d_in { 1.0 } else { 0.0 }).collect();
        let saved = enc.projection.weight.value();
        enc.projection.weight.set(&Tensor::from_vec(eye, (d_out, d_in), &dev).unwrap()).unwrap();
        let mut e1 = vec![0.0f64; d_in];
        e1[0] = 1.0;
        let z = to_f64_vec(&enc.text_proj(&Tensor::new(e1.as_slice(), &dev).unwrap().unsqueeze(0).unwrap()).unwrap()).unwrap();
        assert_eq!(z[0], 1.0);
        assert!(z[1..].iter().all(|v| *v == 0.0));
        enc.projection.weight.set(&saved).unwrap();

        let u = Tensor::from_vec((0..d_in).map(|i| (i as f64).sin()).collect::<Vec<_>>(), (1, d_in), &dev).unwrap();
        let v = Tensor::from_vec((0..d_in).map(|i| (i as f64 * 0.3).cos()).collect::<Vec<_>>(), (1, d_in), &dev).unwrap();
        let lhs = enc.text_proj(&((&u * 2.5).unwrap() + &v).unwrap()).unwrap();
        let rhs = ((enc.text_proj(&u).unwrap() * 2.5).unwrap() + enc.text_proj(&v).unwrap()).unwrap();
        let diff = (lhs - rhs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-6);
    }

    #[test]
    fn full_scale_projection_shape() {
        let cfg = ExperimentConfig::default().validate().unwrap();
        let mut store = ParamStore::new(seed_all(0), DType::F32);
        let p = Linear::new(&mut store, "p", ParamGroup::TextProjection, cfg.txt_dim, cfg.embed_dim, false).unwrap();
        assert_eq!(p.weight.shape().dims(), &[512, 768]);
    }

    #[test]
    fn corrupting_replaced_slots_changes_nothing_but_later_slots_matter() {
        let (_s, enc, bank, seq, _cfg) = tiny();
        let b = seq.context_tokens;
        let reference = to_f64_vec(&enc.encode(&bank, &seq).unwrap().z).unwrap();
        let corrupt_at = |target: usize| {
            let hook = move |layer: usize, h: &Tensor| -> Result<Tensor> {
                if layer != target {
                    return Ok(h.clone());
                }
                let n = h.dim(0)?;
                let noise = (h.i(0..b)?.ones_like()? * 123.0)?;
                Ok(Tensor::cat(&[&noise, &h.i(b..n)?], 0)?)
            };
            to_f64_vec(&enc.encode_with_hook(&bank, &seq, Some(&hook)).unwrap().z).unwrap()
        };
        for layer in 1..=bank.depth() {
            assert_eq!(corrupt_at(layer), reference, "layer {layer}");
        }
        assert_ne!(corrupt_at(bank.depth() + 1), reference);
    }

    #[test]
    fn every_consumed_bank_receives_gradient() {
        let (_s, enc, bank, seq, _cfg) = tiny();
        let loss = enc.encode(&bank, &seq).unwrap().z.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        for p in bank.params() {
            let g = grads.get(p.var().as_tensor()).expect("bank gradient");
            let norm = g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(norm > 0.0, "{}", p.name());
        }
    }

    #[test]
    fn zero_context_equals_plain_encoding() {
        let cfg = ExperimentConfig { context_tokens: 0, ..ExperimentConfig::tiny() }.validate().unwrap();
        let mut store = ParamStore::new(seed_all(4), DType::F64);
        let enc = TextEncoder::new(&mut store, &cfg).unwrap();
        let bank = ContextPromptBank::new(&mut store, 0, cfg.txt_dim, cfg.prompt_depth, false).unwrap();
        let seq = build_sequence(&cfg.class_name, &cfg.prompt_template, cfg.context_length, 0).unwrap();
        let z = to_f64_vec(&enc.encode(&bank, &seq).unwrap().z).unwrap();

        let ids = Tensor::new(seq.ids.as_slice(), &candle_core::Device::Cpu).unwrap();
        let mut h = (enc.token_embedding.value().index_select(&ids, 0).unwrap() + enc.position_embedding.value()).unwrap();
        for layer in &enc.layers {
            h = layer.forward(&h).unwrap();
        }
        let h = enc.final_ln.forward(&h).unwrap();
        let n = seq.len();
        let plain = enc.projection.forward(&h.i(n - 1..n).unwrap()).unwrap();
        assert_eq!(z, to_f64_vec(&plain).unwrap());
    }

    #[test]
    fn shared_bank_variant_has_one_bank() {
        let mut s = ParamStore::new(seed_all(1), DType::F32);
        let bank = ContextPromptBank::new(&mut s, 4, 8, 5, true).unwrap();
        assert_eq!(bank.params().len(), 1);
        assert!(bank.for_layer(4).unwrap().same_as(bank.for_layer(0).unwrap()));
        assert!(bank.for_layer(5).is_none());
    }
}
