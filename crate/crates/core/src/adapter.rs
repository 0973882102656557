//! Text-embedding adapter and decoder prompt assembly.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::param::{ParamGroup, ParamStore};
use crate::types::PromptKind;

/// Two-layer GELU MLP mapping a text embedding (width `h`) to one decoder
/// prompt token (width `m`): `W2 · GELU(W1 z + b1) + b2`.
#[derive(Debug, Clone)]
pub struct TextAdapter {
    pub w1: Linear,
    pub w2: Linear,
}

impl TextAdapter {
    pub fn new(store: &mut ParamStore, hidden: usize, prompt_dim: usize) -> Result<Self> {
        Ok(Self {
            w1: Linear::new(store, "adapter.w1", ParamGroup::Adapter, hidden, prompt_dim, true)?,
            w2: Linear::new(store, "adapter.w2", ParamGroup::Adapter, prompt_dim, prompt_dim, true)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.d_out()
    }

    /// Accepts `(h,)` or `(C, h)` and returns `(m,)` or `(C, m)`.
    pub fn adapt(&self, z: &Tensor) -> Result<Tensor> {
        if z.dim(D::Minus1)? != self.input_dim() {
            return Err(Error::Shape(format!(
                "adapter expects width {}, got {:?}",
                self.input_dim(),
                z.dims()
            )));
        }
        let single = z.rank() == 1;
        let x = if single { z.unsqueeze(0)? } else { z.clone() };
        let y = self.w2.forward(&self.w1.forward(&x)?.gelu_erf()?)?;
        Ok(if single { y.squeeze(0)? } else { y })
    }
}

/// Dense-summary prompt: a learned projection of the mean image feature.
#[derive(Debug, Clone)]
pub struct DenseSummary {
    pub proj: Linear,
}

impl DenseSummary {
    pub fn new(store: &mut ParamStore, feature_dim: usize, prompt_dim: usize) -> Result<Self> {
        Ok(Self { proj: Linear::new(store, "dense.summary", ParamGroup::PromptEmbedding, feature_dim, prompt_dim, true)? })
    }

    /// `features` is `(h·w, d)`; returns a `(1, m)` token.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        self.proj.forward(&features.mean_keepdim(0)?)
    }
}

/// Decoder conditioning: a `(k, m)` matrix and one kind tag per row.
#[derive(Debug, Clone)]
pub struct PromptTokens {
    pub tokens: Tensor,
    pub kinds: Vec<PromptKind>,
}

impl PromptTokens {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

/// Geometric tokens with their kinds, as produced by the prompt encoder.
#[derive(Debug, Clone)]
pub struct GeometricTokens {
    pub tokens: Tensor,
    pub kinds: Vec<PromptKind>,
}

/// Concatenates text, dense-summary and geometric tokens, in that order.
pub fn assemble_prompts(text: &Tensor, dense: Option<&Tensor>, geometric: Option<&GeometricTokens>) -> Result<PromptTokens> {
    let text = if text.rank() == 1 { text.unsqueeze(0)? } else { text.clone() };
    let n_text = text.dim(0)?;
    if n_text == 0 {
        return Err(Error::Prompt("text prompt tokens are required".into()));
    }
    let width = text.dim(1)?;
    let mut parts = vec![text];
    let mut kinds = vec![PromptKind::Text; n_text];
    if let Some(d) = dense {
        let d = if d.rank() == 1 { d.unsqueeze(0)? } else { d.clone() };
        kinds.extend(std::iter::repeat_n(PromptKind::DenseSummary, d.dim(0)?));
        parts.push(d);
    }
    if let Some(g) = geometric {
        if g.tokens.dim(0)? != g.kinds.len() {
            return Err(Error::Shape("geometric kinds do not match token rows".into()));
        }
        if !g.kinds.is_empty() {
            kinds.extend(g.kinds.iter().copied());
            parts.push(g.tokens.clone());
        }
    }
    for p in &parts {
        if p.dim(1)? != width {
            return Err(Error::Shape(format!("prompt width {} vs {width}", p.dim(1)?)));
        }
    }
    Ok(PromptTokens { tokens: Tensor::cat(&parts, 0)?, kinds })
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device, IndexOp};
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::nn::param::to_f64_vec;
    use crate::repro::seed_all;

    fn randn(shape: (usize, usize), stream: &str) -> Tensor {
        let mut rng = seed_all(3).rng(stream);
        let v: Vec<f64> = (0..shape.0 * shape.1).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Step-by-step evaluation of `W2 · GELU(W1 z + b1) + b2` in plain f64.
    fn oracle(a: &TextAdapter, z: &[f64]) -> Vec<f64> {
        let w1 = a.w1.weight.value().to_vec2::<f64>().unwrap();
        let b1 = a.w1.bias.as_ref().unwrap().value().to_vec1::<f64>().unwrap();
        let w2 = a.w2.weight.value().to_vec2::<f64>().unwrap();
        let b2 = a.w2.bias.as_ref().unwrap().value().to_vec1::<f64>().unwrap();
        let gelu = |x: f64| 0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
        let hidden: Vec<f64> = w1
            .iter()
            .zip(&b1)
            .map(|(row, b)| gelu(row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + b))
            .collect();
        w2.iter().zip(&b2).map(|(row, b)| row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>() + b).collect()
    }

    fn adapter(h: usize, m: usize) -> (ParamStore, TextAdapter) {
        let mut s = ParamStore::new(seed_all(5), DType::F64);
        let a = TextAdapter::new(&mut s, h, m).unwrap();
        a.w1.bias.as_ref().unwrap().set(&randn((1, m), "b1").flatten_all().unwrap()).unwrap();
        a.w2.bias.as_ref().unwrap().set(&randn((1, m), "b2").flatten_all().unwrap()).unwrap();
        (s, a)
    }

    #[test]
    fn collapses_to_constant_bias() {
        let (s, a) = adapter(8, 4);
        a.w1.weight.set(&Tensor::zeros((4, 8), DType::F64, s.device()).unwrap()).unwrap();
        a.w1.bias.as_ref().unwrap().set(&Tensor::zeros(4, DType::F64, s.device()).unwrap()).unwrap();
        a.w2.weight.set(&Tensor::zeros((4, 4), DType::F64, s.device()).unwrap()).unwrap();
        let c = Tensor::new(&[1.5f64, -2.0, 0.25, 7.0], s.device()).unwrap();
        a.w2.bias.as_ref().unwrap().set(&c).unwrap();
        for stream in ["z1", "z2"] {
            let z = randn((1, 8), stream).squeeze(0).unwrap();
            assert_eq!(to_f64_vec(&a.adapt(&z).unwrap()).unwrap(), vec![1.5, -2.0, 0.25, 7.0]);
        }
    }

    #[test]
    fn matches_formula_oracle() {
        let (_s, a) = adapter(12, 6);
        for stream in ["o1", "o2", "o3"] {
            let z = randn((1, 12), stream).squeeze(0).unwrap();
            let got = to_f64_vec(&a.adapt(&z).unwrap()).unwrap();
            let want = oracle(&a, &z.to_vec1::<f64>().unwrap());
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn wrong_width_errors() {
        let (s, a) = adapter(8, 4);
        assert!(a.adapt(&Tensor::zeros(7, DType::F64, s.device()).unwrap()).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let (_s, a) = adapter(5, 3);
        let z = candle_core::Var::from_tensor(&randn((1, 5), "gz").squeeze(0).unwrap()).unwrap();
        let loss_of = |a: &TextAdapter, z: &Tensor| a.adapt(z).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss_of(&a, z.as_tensor()).backward().unwrap();
        let params = [&a.w1.weight, a.w1.bias.as_ref().unwrap(), &a.w2.weight, a.w2.bias.as_ref().unwrap()];
        let h = 1e-5;
        for p in params {
            let g = to_f64_vec(grads.get(p.var().as_tensor()).unwrap()).unwrap();
            let base = to_f64_vec(&p.value()).unwrap();
            for i in 0..base.len() {
                let eval = |d: f64| {
                    let mut v = base.clone();
                    v[i] += d;
                    p.set(&Tensor::from_vec(v, p.shape().clone(), &Device::Cpu).unwrap()).unwrap();
                    loss_of(&a, z.as_tensor()).to_scalar::<f64>().unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                eval(0.0);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
                assert!(rel < 1e-4, "{}[{i}] fd {fd} an {}", p.name(), g[i]);
            }
        }
        let gz = to_f64_vec(grads.get(z.as_tensor()).unwrap()).unwrap();
        let zb = to_f64_vec(z.as_tensor()).unwrap();
        for i in 0..zb.len() {
            let eval = |d: f64| {
                let mut v = zb.clone();
                v[i] += d;
                loss_of(&a, &Tensor::new(v.as_slice(), &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (fd - gz[i]).abs() / fd.abs().max(gz[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "z[{i}]");
        }
    }

    #[test]
    fn output_stays_within_operator_norm_envelope() {
        let (_s, a) = adapter(10, 6);
        let frob = |t: &Tensor| t.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap().sqrt();
        // Frobenius norms upper-bound operator norms
        let bound = frob(&a.w2.weight.value()) * frob(&a.w1.weight.value()) * 1.13;
        for (s1, s2) in [("l1", "l2"), ("l3", "l4"), ("l5", "l6")] {
            let u = randn((1, 10), s1).squeeze(0).unwrap();
            let v = randn((1, 10), s2).squeeze(0).unwrap();
            let du = frob(&(a.adapt(&u).unwrap() - a.adapt(&v).unwrap()).unwrap());
            let dz = frob(&(&u - &v).unwrap());
            assert!(du <= bound * dz, "{du} > {bound} * {dz}");
        }
    }

    #[test]
    fn assembly_counts_order_and_values() {
        let text = randn((1, 4), "t");
        let dense = randn((1, 4), "d");
        let geo = GeometricTokens {
            tokens: randn((3, 4), "g"),
            kinds: vec![PromptKind::BoxCorner, PromptKind::BoxCorner, PromptKind::Point],
        };
        let p = assemble_prompts(&text, Some(&dense), None).unwrap();
        assert_eq!(p.len(), 2);
        let p = assemble_prompts(&text, Some(&dense), Some(&geo)).unwrap();
        assert_eq!(p.len(), 5);
        assert_eq!(
            p.kinds,
            vec![PromptKind::Text, PromptKind::DenseSummary, PromptKind::BoxCorner, PromptKind::BoxCorner, PromptKind::Point]
        );
        assert_eq!(to_f64_vec(&p.tokens.i(0..1).unwrap()).unwrap(), to_f64_vec(&text).unwrap());
        assert_eq!(to_f64_vec(&p.tokens.i(1..2).unwrap()).unwrap(), to_f64_vec(&dense).unwrap());
        assert_eq!(to_f64_vec(&p.tokens.i(2..5).unwrap()).unwrap(), to_f64_vec(&geo.tokens).unwrap());
        let again = assemble_prompts(&text, Some(&dense), Some(&geo)).unwrap();
        assert_eq!(to_f64_vec(&again.tokens).unwrap(), to_f64_vec(&p.tokens).unwrap());
    }

    #[test]
    fn empty_text_is_rejected() {
        let text = Tensor::zeros((0, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(assemble_prompts(&text, None, None).is_err());
    }
}
