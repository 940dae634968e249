//! Plain-transformer MAE decoder.
//!
//! The decoder sees the whole patch grid: encoded tokens at their kept
//! positions, one shared learned mask token everywhere else, and a fixed
//! sine-cosine positional embedding on every position. A linear head
//! predicts the normalized pixels of each patch.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::masking::CompactMap;
use crate::nn::{multi_head_attention, sincos_2d, Init, LayerNorm, Linear, Mlp};
use crate::numerics::{Element, Graph, ParamId, Tensor, Var};
use crate::patchio::ReconTarget;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            depth: 2,
            dim: 64,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidArgument("decoder depth must be at least 1".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "decoder dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "decoder dim {} must be divisible by 4 for the sine-cosine embedding",
                self.dim
            )));
        }
        Ok(())
    }
}

/// Pre-norm transformer block with global self-attention.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    heads: usize,
    dim: usize,
}

impl DecoderBlock {
    fn new(init: &mut Init, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(DecoderBlock {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), d)?,
            qkv: Linear::new(init, &format!("{name}.attn.qkv"), d, 3 * d, true)?,
            proj: Linear::new(init, &format!("{name}.attn.proj"), d, d, true)?,
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), d)?,
            mlp: Mlp::new(init, &format!("{name}.mlp"), d, d * cfg.mlp_ratio)?,
            heads: cfg.heads,
            dim: d,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let q = g.tape.slice_cols(qkv, 0, self.dim)?;
        let k = g.tape.slice_cols(qkv, self.dim, self.dim)?;
        let v = g.tape.slice_cols(qkv, 2 * self.dim, self.dim)?;
        let a = multi_head_attention(g, q, k, v, self.heads, None, None)?;
        let a = self.proj.forward(g, a)?;
        let x = g.tape.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.mlp.forward(g, h)?;
        g.tape.add(x, h)
    }

    pub fn macs(&self, n: usize) -> u64 {
        self.qkv.macs(n) + crate::nn::attention_macs(n, n, self.dim) + self.proj.macs(n) + self.mlp.macs(n)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub adapter: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Decoder {
    /// `in_dim` is the channel count of the encoder tokens after the
    /// sub-pixel shuffle; the head predicts `3·P²` values per patch.
    pub fn new(init: &mut Init, cfg: &DecoderConfig, in_dim: usize, patch_size: usize) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|b| DecoderBlock::new(init, &format!("decoder.block{b}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Decoder {
            config: *cfg,
            adapter: Linear::new(init, "decoder.embed", in_dim, cfg.dim, true)?,
            mask_token: init.normal("decoder.mask_token", &[1, cfg.dim], 0.02)?,
            blocks,
            norm: LayerNorm::new(init, "decoder.norm", cfg.dim)?,
            head: Linear::new(init, "decoder.pred", cfg.dim, 3 * patch_size * patch_size, true)?,
        })
    }

    /// Projects the compact tokens `[|kept|, in_dim]` to the decoder width,
    /// scatters them to their full-grid positions, fills every dropped
    /// position with the mask token and adds the positional embedding.
    pub fn assemble_full_tokens<T: Element>(&self, g: &mut Graph<T>, encoded: Var, map: &CompactMap, rows: usize, cols: usize) -> Result<Var> {
        let n = g.tape.shape(encoded)[0];
        if n != map.len() {
            return Err(Error::shape(
                "assemble_full_tokens",
                format!("{n} encoded tokens for {} kept patches", map.len()),
            ));
        }
        if map.to_full.len() != rows * cols {
            return Err(Error::shape(
                "assemble_full_tokens",
                format!("map covers {} patches, grid is {rows}x{cols}", map.to_full.len()),
            ));
        }
        let x = self.adapter.forward(g, encoded)?;
        let tok = g.param(self.mask_token)?;
        let pool = g.tape.concat_rows(&[x, tok])?;
        let index: Vec<usize> = map.to_full.iter().map(|c| c.unwrap_or(n)).collect();
        let full = g.tape.gather_rows(pool, Arc::new(index))?;
        let pos = g.tape.constant(sincos_2d(rows, cols, self.config.dim).cast())?;
        g.tape.add(full, pos)
    }

    pub fn decode<T: Element>(&self, g: &mut Graph<T>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        Ok(x)
    }

    /// Final norm and the per-patch pixel head.
    pub fn predict_pixels<T: Element>(&self, g: &mut Graph<T>, decoded: Var) -> Result<Var> {
        let h = self.norm.forward(g, decoded)?;
        self.head.forward(g, h)
    }

    pub fn macs(&self, n_full: usize, n_kept: usize) -> u64 {
        self.adapter.macs(n_kept) + self.blocks.iter().map(|b| b.macs(n_full)).sum::<u64>() + self.head.macs(n_full)
    }
}

/// Reconstruction loss over a set of target patches.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    /// Mean squared error of each target patch, aligned with `rows`.
    pub per_patch: Vec<f64>,
    pub rows: Vec<usize>,
    pub count: usize,
}

/// Records the masked loss on the tape and returns it with its report.
/// `l1` swaps the squared error for the absolute error.
pub fn masked_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: &ReconTarget, l1: bool) -> Result<(Var, LossReport)> {
    let rows = Arc::new(target.rows.clone());
    let tgt: Arc<Tensor<T>> = Arc::new(target.targets.cast());
    let loss = if l1 {
        g.tape.masked_l1(pred, tgt.clone(), rows.clone())?
    } else {
        g.tape.masked_mse(pred, tgt.clone(), rows.clone())?
    };
    let p = g.tape.value(pred);
    let d = p.shape()[1];
    let per_patch: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let e: f64 = p.row(r)
                .iter()
                .zip(tgt.row(i))
                .map(|(a, b)| {
                    let diff = a.as_f64() - b.as_f64();
                    if l1 {
                        diff.abs()
                    } else {
                        diff * diff
                    }
                })
                .sum();
            e / d as f64
        })
        .collect();
    let report = LossReport {
        total: g.tape.value(loss).data()[0].as_f64(),
        count: per_patch.len(),
        per_patch,
        rows: target.rows.clone(),
    };
    Ok((loss, report))
}
