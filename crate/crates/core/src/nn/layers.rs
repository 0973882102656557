use candle_core::{Tensor, D};

use crate::config::Projection;
use crate::error::Result;
use crate::nn::lora::{lora_wrap, LoraLinear};
use crate::nn::param::{Param, ParamGroup, ParamStore};

/// `y = x Wᵀ + b` with `W` of shape (d_out, d_in).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), group, (d_out, d_in), (1.0 / d_in as f64).sqrt())?;
        let bias = if bias {
            Some(store.zeros(&format!("{name}.bias"), group, (d_out,))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape().dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape().dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.tensor().t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.tensor())?,
            None => y,
        })
    }
}

/// A linear layer that may carry a LoRA pair.
#[derive(Debug, Clone)]
pub enum AdaptableLinear {
    Plain(Linear),
    Lora(LoraLinear),
}

impl AdaptableLinear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, lora_rank: Option<usize>) -> Result<Self> {
        let base = Linear::new(store, name, ParamGroup::Base, d_in, d_out, true)?;
        match lora_rank {
            Some(r) => Ok(AdaptableLinear::Lora(lora_wrap(base, r, store, name)?)),
            None => Ok(AdaptableLinear::Plain(base)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            AdaptableLinear::Plain(l) => l.forward(x),
            AdaptableLinear::Lora(l) => l.forward(x),
        }
    }

    pub fn lora(&self) -> Option<&LoraLinear> {
        match self {
            AdaptableLinear::Lora(l) => Some(l),
            AdaptableLinear::Plain(_) => None,
        }
    }

    pub fn lora_mut(&mut self) -> Option<&mut LoraLinear> {
        match self {
            AdaptableLinear::Lora(l) => Some(l),
            AdaptableLinear::Plain(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.ones(&format!("{name}.gamma"), ParamGroup::Base, (dim,))?,
            beta: store.zeros(&format!("{name}.beta"), ParamGroup::Base, (dim,))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma.tensor())?.broadcast_add(&self.beta.tensor())?)
    }
}

/// Which projections of an attention block get a LoRA pair, and at what rank.
#[derive(Debug, Clone, Default)]
pub struct LoraPlan {
    pub rank: usize,
    pub projections: Vec<Projection>,
}

impl LoraPlan {
    pub fn none() -> Self {
        Self::default()
    }

    fn rank_for(&self, p: Projection) -> Option<usize> {
        self.projections.contains(&p).then_some(self.rank)
    }
}

/// Multi-head attention whose projections map `dim → internal → dim`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: AdaptableLinear,
    pub k: AdaptableLinear,
    pub v: AdaptableLinear,
    pub out: AdaptableLinear,
    heads: usize,
    internal: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, internal: usize, heads: usize, lora: &LoraPlan) -> Result<Self> {
        Ok(Self {
            q: AdaptableLinear::new(store, &format!("{name}.q"), dim, internal, lora.rank_for(Projection::Q))?,
            k: AdaptableLinear::new(store, &format!("{name}.k"), dim, internal, lora.rank_for(Projection::K))?,
            v: AdaptableLinear::new(store, &format!("{name}.v"), dim, internal, lora.rank_for(Projection::V))?,
            out: AdaptableLinear::new(store, &format!("{name}.out"), internal, dim, lora.rank_for(Projection::Out))?,
            heads,
            internal,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(0)?;
        Ok(x.reshape((n, self.heads, self.internal / self.heads))?.transpose(0, 1)?.contiguous()?)
    }

    /// `query` is (n_q, dim); `key` and `value` are (n_k, dim).
    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
        let n_q = query.dim(0)?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(key)?)?;
        let v = self.split_heads(&self.v.forward(value)?)?;
        let scale = 1.0 / ((self.internal / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?)? * scale)?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let mixed = weights.matmul(&v)?.transpose(0, 1)?.reshape((n_q, self.internal))?;
        self.out.forward(&mixed)
    }

    pub fn projections(&self) -> [&AdaptableLinear; 4] {
        [&self.q, &self.k, &self.v, &self.out]
    }

    pub fn projections_mut(&mut self) -> [&mut AdaptableLinear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.out]
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), group, d_in, hidden, true)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), group, hidden, d_out, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize, lora: &LoraPlan) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, dim, heads, lora)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), ParamGroup::Base, dim, dim * mlp_ratio, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, &h)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}
