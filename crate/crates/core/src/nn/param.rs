//! Named parameters and the registry that owns them.
//!
//! Every weight lives in a [`Var`]. Whether gradients reach it is decided at
//! read time: frozen parameters hand out a detached view of their storage,
//! so no op built from them is ever tracked by the autograd tape.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::repro::SeedSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Low-rank factor pairs.
    Lora,
    /// Learnable text context tokens.
    ContextBank,
    /// Text-embedding to prompt-token MLP.
    Adapter,
    /// Learned prompt-side embeddings: geometric type embeddings, the dense
    /// summary projection, the no-mask bias and the decoder output token.
    PromptEmbedding,
    /// Text projection into the shared embedding space.
    TextProjection,
    /// Everything standing in for pretrained backbone weights.
    Base,
}

impl ParamGroup {
    pub fn label(&self) -> &'static str {
        match self {
            ParamGroup::Lora => "lora",
            ParamGroup::ContextBank => "context_bank",
            ParamGroup::Adapter => "adapter",
            ParamGroup::PromptEmbedding => "prompt_embedding",
            ParamGroup::TextProjection => "text_projection",
            ParamGroup::Base => "base",
        }
    }
}

struct ParamInner {
    name: String,
    group: ParamGroup,
    var: Var,
    trainable: AtomicBool,
}

#[derive(Clone)]
pub struct Param {
    inner: Arc<ParamInner>,
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Param({}, {:?}, {:?}, trainable={})",
            self.name(),
            self.group(),
            self.inner.var.shape(),
            self.is_trainable()
        )
    }
}

impl Param {
    /// A parameter not registered in any store.
    pub fn standalone(name: impl Into<String>, group: ParamGroup, value: &Tensor, trainable: bool) -> Result<Self> {
        Ok(Self {
            inner: Arc::new(ParamInner {
                name: name.into(),
                group,
                var: Var::from_tensor(&value.detach())?,
                trainable: AtomicBool::new(trainable),
            }),
        })
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn group(&self) -> ParamGroup {
        self.inner.group
    }

    pub fn is_trainable(&self) -> bool {
        self.inner.trainable.load(Ordering::Relaxed)
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.inner.trainable.store(trainable, Ordering::Relaxed)
    }

    /// Value for use in a forward pass; tracked by autograd only when trainable.
    pub fn tensor(&self) -> Tensor {
        if self.is_trainable() {
            self.inner.var.as_tensor().clone()
        } else {
            self.inner.var.as_tensor().detach()
        }
    }

    /// The value, never tracked.
    /// Detached copy of the current value; later updates do not alias it.
    pub fn value(&self) -> Tensor {
        self.inner.var.as_tensor().copy().expect("copy of a cpu tensor").detach()
    }

    pub fn var(&self) -> &Var {
        &self.inner.var
    }

    pub fn shape(&self) -> &Shape {
        self.inner.var.shape()
    }

    pub fn elem_count(&self) -> usize {
        self.inner.var.elem_count()
    }

    /// Overwrites the value in place; every holder of this parameter sees it.
    pub fn set(&self, value: &Tensor) -> Result<()> {
        if value.shape() != self.shape() {
            return Err(Error::Shape(format!(
                "parameter {}: {:?} vs {:?}",
                self.name(),
                value.shape(),
                self.shape()
            )));
        }
        self.inner.var.set(&value.to_dtype(self.inner.var.dtype())?)?;
        Ok(())
    }

    pub fn same_as(&self, other: &Param) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Registry of every parameter in a model, in creation order.
#[derive(Clone)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
    seeds: SeedSource,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore").field("params", &self.params.len()).field("dtype", &self.dtype).finish()
    }
}

impl ParamStore {
    pub fn new(seeds: SeedSource, dtype: DType) -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
            seeds,
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seeds(&self) -> SeedSource {
        self.seeds
    }

    /// Groups that receive gradients after [`freeze_base`](crate::nn::lora::freeze_base).
    pub fn default_trainable(group: ParamGroup) -> bool {
        matches!(
            group,
            ParamGroup::Lora | ParamGroup::ContextBank | ParamGroup::Adapter | ParamGroup::PromptEmbedding
        )
    }

    pub fn insert(&mut self, name: &str, group: ParamGroup, value: Tensor) -> Result<Param> {
        if self.index.contains_key(name) {
            return Err(Error::Shape(format!("duplicate parameter name {name}")));
        }
        let p = Param::standalone(name, group, &value.to_dtype(self.dtype)?, Self::default_trainable(group))?;
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(p.clone());
        Ok(p)
    }

    /// Gaussian init drawn from a stream keyed by the parameter name, so the
    /// value of a weight does not depend on which other weights exist.
    pub fn normal(&mut self, name: &str, group: ParamGroup, shape: impl Into<Shape>, std: f64) -> Result<Param> {
        let shape = shape.into();
        let mut rng = self.seeds.rng(&format!("param/{name}"));
        let dist = Normal::new(0.0, std).map_err(|e| Error::Shape(e.to_string()))?;
        let values: Vec<f64> = (0..shape.elem_count()).map(|_| dist.sample(&mut rng)).collect();
        let t = Tensor::from_vec(values, shape, &self.device)?;
        self.insert(name, group, t)
    }

    pub fn zeros(&mut self, name: &str, group: ParamGroup, shape: impl Into<Shape>) -> Result<Param> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.insert(name, group, t)
    }

    pub fn ones(&mut self, name: &str, group: ParamGroup, shape: impl Into<Shape>) -> Result<Param> {
        let t = Tensor::ones(shape, self.dtype, &self.device)?;
        self.insert(name, group, t)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|i| &self.params[*i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.is_trainable())
    }

    pub fn frozen(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| !p.is_trainable())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Flattened f64 copy of a tensor, for hashing and comparisons.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// SHA-256 over the raw little-endian bytes of the given parameters' values.
pub fn params_hash<'a>(params: impl IntoIterator<Item = &'a Param>) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name().as_bytes());
        let v = p.value().flatten_all()?;
        match v.dtype() {
            DType::F32 => {
                for x in v.to_vec1::<f32>()? {
                    h.update(x.to_le_bytes());
                }
            }
            _ => {
                for x in v.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                    h.update(x.to_le_bytes());
                }
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}
