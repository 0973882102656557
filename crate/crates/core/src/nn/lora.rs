//! Low-rank adaptation of frozen linear layers: `W' = W + A·B` with
//! `A ∈ R^{d_out×r}`, `B ∈ R^{r×d_in}` and no α/r scaling.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::param::{Param, ParamGroup, ParamStore};

/// Std of the Gaussian used for the `A` factor.
pub const LORA_A_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct LoraFactorPair {
    /// (d_out, r)
    pub a: Param,
    /// (r, d_in)
    pub b: Param,
}

impl LoraFactorPair {
    pub fn rank(&self) -> usize {
        self.a.shape().dims()[1]
    }

    /// The dense update `A·B`, untracked.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.a.value().matmul(&self.b.value())?)
    }
}

#[derive(Debug, Clone)]
pub struct LoraLinear {
    base: Linear,
    factors: LoraFactorPair,
    merged: Option<Linear>,
}

/// Wraps a linear layer with a rank-`rank` pair. The base weight and bias are
/// frozen; `A ~ N(0, 0.02²)` and `B = 0`, so the wrapped layer initially
/// computes exactly what the base layer does.
pub fn lora_wrap(base: Linear, rank: usize, store: &mut ParamStore, name: &str) -> Result<LoraLinear> {
    if rank < 1 {
        return Err(Error::Lora(format!("rank {rank} below 1 for {name}")));
    }
    base.weight.set_trainable(false);
    if let Some(b) = &base.bias {
        b.set_trainable(false);
    }
    let (d_out, d_in) = (base.d_out(), base.d_in());
    let a = store.normal(&format!("{name}.lora_a"), ParamGroup::Lora, (d_out, rank), LORA_A_STD)?;
    let b = store.zeros(&format!("{name}.lora_b"), ParamGroup::Lora, (rank, d_in))?;
    Ok(LoraLinear { base, factors: LoraFactorPair { a, b }, merged: None })
}

impl LoraLinear {
    pub fn base(&self) -> &Linear {
        &self.base
    }

    pub fn factors(&self) -> &LoraFactorPair {
        &self.factors
    }

    pub fn is_merged(&self) -> bool {
        self.merged.is_some()
    }

    /// `x Wᵀ + b + (x Bᵀ) Aᵀ`, or the merged layer once merged.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if let Some(m) = &self.merged {
            return m.forward(x);
        }
        let base = self.base.forward(x)?;
        let low = x
            .broadcast_matmul(&self.factors.b.tensor().t()?)?
            .broadcast_matmul(&self.factors.a.tensor().t()?)?;
        Ok((base + low)?)
    }

    /// Folds `A·B` into a plain frozen layer and switches this layer to use it.
    pub fn merge(&mut self) -> Result<Linear> {
        if self.merged.is_some() {
            return Err(Error::Lora("already merged".into()));
        }
        let weight = (self.base.weight.value() + self.factors.delta()?)?;
        let merged = Linear {
            weight: Param::standalone(format!("{}.merged", self.base.weight.name()), ParamGroup::Base, &weight, false)?,
            bias: match &self.base.bias {
                Some(b) => Some(Param::standalone(format!("{}.merged", b.name()), ParamGroup::Base, &b.value(), false)?),
                None => None,
            },
        };
        self.merged = Some(merged.clone());
        Ok(merged)
    }
}

/// Marks every parameter outside the LoRA, context-bank, adapter and
/// prompt-embedding groups as frozen. The text projection stays trainable
/// only when `text_proj_trainable` is set.
pub fn freeze_base(store: &ParamStore, text_proj_trainable: bool) {
    for p in store.iter() {
        let trainable = ParamStore::default_trainable(p.group())
            || (p.group() == ParamGroup::TextProjection && text_proj_trainable);
        p.set_trainable(trainable);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
    /// Trainable parameters per group.
    pub per_group: BTreeMap<ParamGroup, usize>,
}

impl ParamCount {
    pub fn group(&self, g: ParamGroup) -> usize {
        self.per_group.get(&g).copied().unwrap_or(0)
    }

    /// Trainable parameters outside the LoRA, bank and adapter groups.
    pub fn other(&self) -> usize {
        self.trainable - self.group(ParamGroup::Lora) - self.group(ParamGroup::ContextBank) - self.group(ParamGroup::Adapter)
    }
}

pub fn count_trainable(store: &ParamStore) -> ParamCount {
    let mut per_group = BTreeMap::new();
    let mut trainable = 0;
    let mut total = 0;
    for p in store.iter() {
        let n = p.elem_count();
        total += n;
        if p.is_trainable() {
            trainable += n;
            *per_group.entry(p.group()).or_insert(0) += n;
        }
    }
    ParamCount { trainable, total, per_group }
}
