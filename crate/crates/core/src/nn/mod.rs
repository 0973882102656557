//! Parameters, layers, low-rank adaptation and optimization on top of candle.

pub mod layers;
pub mod lora;
pub mod optim;
pub mod param;

pub use layers::{AdaptableLinear, Attention, LayerNorm, Linear, LoraPlan, Mlp, TransformerBlock};
pub use lora::{count_trainable, freeze_base, lora_wrap, LoraFactorPair, LoraLinear, ParamCount};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use param::{Param, ParamGroup, ParamStore};
