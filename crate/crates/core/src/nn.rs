//! Layers shared by the encoders, the decoder and the prediction heads.
//!
//! Layers hold [`ParamId`]s only; values live in a [`ParamStore`] and enter a
//! forward pass through a [`Graph`]. Weights are stored `[in, out]`, so a
//! linear layer computes `x · W + b`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{Element, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{stream_rng, Stream};
use crate::Result;

pub const LN_EPS: f64 = 1e-6;

/// Registers parameters with deterministic initial values.
pub struct Init<'a> {
    store: &'a mut ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore<f64>, seed: u64) -> Self {
        Init {
            store,
            rng: stream_rng(seed, Stream::Init, 0),
        }
    }

    /// Xavier-uniform `[fan_in, fan_out]` matrix.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-a..a));
        self.store.add(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, value))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = init.xavier(&format!("{name}.weight"), in_dim, out_dim)?;
        let bias = if bias {
            Some(init.constant(&format!("{name}.bias"), &[out_dim], 0.0)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let y = g.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b)?;
                g.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    /// Multiply-accumulates for `tokens` input rows.
    pub fn macs(&self, tokens: usize) -> u64 {
        (tokens * self.in_dim * self.out_dim) as u64
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: init.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            beta: init.constant(&format!("{name}.bias"), &[dim], 0.0)?,
            dim,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        g.tape.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(init, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.gelu(h)?;
        self.fc2.forward(g, h)
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        self.fc1.macs(tokens) + self.fc2.macs(tokens)
    }
}

/// Multi-head scaled dot-product attention of `q [n, d]` over `k, v [m, d]`.
///
/// `keep` is an optional `n × m` support mask; masked pairs get exactly zero
/// weight. `bias` holds one additive `[n, m]` logit bias per head.
pub fn multi_head_attention<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    keep: Option<&[bool]>,
    bias: Option<&[Var]>,
) -> Result<Var> {
    let d = g.tape.shape(q)[1];
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.tape.slice_cols(q, h * dh, dh)?,
                g.tape.slice_cols(k, h * dh, dh)?,
                g.tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let logits = g.tape.matmul_nt(qh, kh)?;
        let mut logits = g.tape.scale(logits, scale)?;
        if let Some(b) = bias {
            logits = g.tape.add(logits, b[h])?;
        }
        let attn = g.tape.masked_softmax(logits, keep)?;
        outs.push(g.tape.matmul(attn, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.tape.concat_cols(&outs)
    }
}

/// Multiply-accumulates of [`multi_head_attention`] for `n` queries over `m` keys.
pub fn attention_macs(n: usize, m: usize, dim: usize) -> u64 {
    2 * (n * m * dim) as u64
}

/// Fixed 2D sine-cosine embedding `[rows·cols, dim]` in raster order. The
/// first half of the channels encodes the row coordinate, the second half the
/// column coordinate; each half is `[sin(p·ω_i)…, cos(p·ω_i)…]` with
/// `ω_i = 10000^(−i/(dim/4))`.
pub fn sincos_2d(rows: usize, cols: usize, dim: usize) -> Tensor<f64> {
    assert!(dim % 4 == 0, "sine-cosine embedding needs dim divisible by 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                data.extend(omega.iter().map(|w| (pos * w).sin()));
                data.extend(omega.iter().map(|w| (pos * w).cos()));
            }
        }
    }
    Tensor::new(vec![rows * cols, dim], data).expect("sincos shape")
}

/// Attention positional treatment of the windowed encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BiasMode {
    /// No positional term inside attention.
    #[default]
    Off,
    /// Learned per-offset table indexed by compact-space offsets.
    Compact,
    /// Learned per-offset table indexed by full-space offsets.
    FullSpace,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sincos_is_deterministic_and_bounded() {
        let a = sincos_2d(4, 4, 16);
        let b = sincos_2d(4, 4, 16);
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[16, 16]);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        // Position (0, 0): sines are zero, cosines one.
        assert_eq!(&a.row(0)[..4], &[0.0; 4]);
        assert_eq!(&a.row(0)[4..8], &[1.0; 4]);
    }

    #[test]
    fn linear_shapes_and_names() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 0);
        let lin = Linear::new(&mut init, "head", 3, 5, true).unwrap();
        assert_eq!(store.name(lin.weight), "head.weight");
        assert_eq!(store.get(lin.weight).shape(), &[3, 5]);
        let mut g = Graph::new(&store);
        let x = g.tape.constant(Tensor::<f64>::full(&[2, 3], 1.0)).unwrap();
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 5]);
    }
}
