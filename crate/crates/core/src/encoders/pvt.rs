use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::geometry::{local_stages, TokenMap};
use super::{check_common, full_extents, zero_placeholders, StageSpec};
use crate::masking::PatchGrid;
use crate::nn::{multi_head_attention, Init, LayerNorm, Linear, Mlp};
use crate::numerics::{Element, Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PvtStage {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// Full-space spatial-reduction window edge, in this stage's tokens.
    pub sr: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvtConfig {
    pub patch_size: usize,
    pub embed_stride: usize,
    pub mlp_ratio: usize,
    pub stages: Vec<PvtStage>,
}

impl Default for PvtConfig {
    fn default() -> Self {
        let stage = |dim, heads, sr| PvtStage {
            depth: 1,
            dim,
            heads,
            sr,
        };
        PvtConfig {
            patch_size: 16,
            embed_stride: 4,
            mlp_ratio: 4,
            stages: vec![stage(32, 1, 8), stage(64, 2, 4), stage(128, 4, 2), stage(256, 8, 1)],
        }
    }
}

/// Every reason the compact and full-masked routes would not be defined for
/// `cfg` on `grid`.
pub fn validate_pvt_geometry(cfg: &PvtConfig, grid: &PatchGrid) -> Vec<String> {
    let mut out = Vec::new();
    let specs: Vec<StageSpec> = cfg
        .stages
        .iter()
        .map(|s| StageSpec {
            depth: s.depth,
            dim: s.dim,
            heads: s.heads,
        })
        .collect();
    let Some(tpp) = check_common(&specs, cfg.patch_size, cfg.embed_stride, &mut out) else {
        return out;
    };
    if grid.patch_size != cfg.patch_size {
        out.push(format!(
            "grid patch size {} differs from encoder patch size {}",
            grid.patch_size, cfg.patch_size
        ));
    }
    let ext = full_extents(grid, tpp, cfg.stages.len(), &mut out);
    let local = local_stages(tpp, cfg.stages.len());
    for (s, (st, &(fr, fc))) in cfg.stages.iter().zip(&ext).enumerate() {
        let sr = st.sr;
        if sr == 0 {
            out.push(format!("stage {s}: sr window must be positive"));
            continue;
        }
        if s < local {
            let t = tpp >> s;
            if sr % 2 != 0 {
                out.push(format!("stage {s}: odd sr window {sr} cannot halve"));
                continue;
            }
            if sr % (2 * t) != 0 {
                out.push(format!(
                    "stage {s}: sr window {sr} is not aligned to 2x2 patch cells ({} tokens)",
                    2 * t
                ));
            }
            if fr % sr != 0 || fc % sr != 0 {
                out.push(format!("stage {s}: resolution {fr}x{fc} not divisible by sr window {sr}"));
            }
        } else {
            let (cr, cc) = (fr / 2, fc / 2);
            for (space, r, c) in [("full", fr, fc), ("compact", cr, cc)] {
                if r % sr != 0 || c % sr != 0 {
                    out.push(format!("stage {s}: {space} resolution {r}x{c} not divisible by sr window {sr}"));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub(crate) struct PvtBlock {
    norm1: LayerNorm,
    q: Linear,
    kv: Linear,
    sr_norm: Option<LayerNorm>,
    proj: Linear,
    norm2: LayerNorm,
    mlp: Mlp,
    heads: usize,
    dim: usize,
}

pub(crate) fn build(cfg: &PvtConfig, init: &mut Init, prefix: &str) -> Result<Vec<Vec<PvtBlock>>> {
    let mut stages = Vec::with_capacity(cfg.stages.len());
    for (s, st) in cfg.stages.iter().enumerate() {
        let d = st.dim;
        let mut blocks = Vec::with_capacity(st.depth);
        for b in 0..st.depth {
            let p = format!("{prefix}.stage{s}.block{b}");
            blocks.push(PvtBlock {
                norm1: LayerNorm::new(init, &format!("{p}.norm1"), d)?,
                q: Linear::new(init, &format!("{p}.attn.q"), d, d, true)?,
                kv: Linear::new(init, &format!("{p}.attn.kv"), d, 2 * d, true)?,
                sr_norm: if st.sr > 1 {
                    Some(LayerNorm::new(init, &format!("{p}.attn.sr_norm"), d)?)
                } else {
                    None
                },
                proj: Linear::new(init, &format!("{p}.attn.proj"), d, d, true)?,
                norm2: LayerNorm::new(init, &format!("{p}.norm2"), d)?,
                mlp: Mlp::new(init, &format!("{p}.mlp"), d, d * cfg.mlp_ratio)?,
                heads: st.heads,
                dim: d,
            });
        }
        stages.push(blocks);
    }
    Ok(stages)
}

impl PvtBlock {
    fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        pool: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
    ) -> Result<Var> {
        let xn = self.norm1.forward(g, x)?;
        let q = self.q.forward(g, xn)?;
        let mut kv_in = pool(g, xn)?;
        if let Some(n) = &self.sr_norm {
            kv_in = n.forward(g, kv_in)?;
        }
        let kv = self.kv.forward(g, kv_in)?;
        let k = g.tape.slice_cols(kv, 0, self.dim)?;
        let v = g.tape.slice_cols(kv, self.dim, self.dim)?;
        let a = multi_head_attention(g, q, k, v, self.heads, None, None)?;
        let a = self.proj.forward(g, a)?;
        let x = g.tape.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.mlp.forward(g, h)?;
        g.tape.add(x, h)
    }

    pub(crate) fn macs(&self, rows: usize, cols: usize, sr: usize) -> u64 {
        let n = rows * cols;
        let m = (rows / sr) * (cols / sr);
        self.q.macs(n) + self.kv.macs(m) + crate::nn::attention_macs(n, m, self.dim) + self.proj.macs(n) + self.mlp.macs(n)
    }
}

/// Raster token lists of the non-overlapping `sr × sr` windows, windows in
/// raster order.
pub fn window_segments(rows: usize, cols: usize, sr: usize) -> Vec<Vec<usize>> {
    let mut segs = Vec::with_capacity((rows / sr) * (cols / sr));
    for wy in 0..rows / sr {
        for wx in 0..cols / sr {
            let mut seg = Vec::with_capacity(sr * sr);
            for y in wy * sr..(wy + 1) * sr {
                for x in wx * sr..(wx + 1) * sr {
                    seg.push(y * cols + x);
                }
            }
            segs.push(seg);
        }
    }
    segs
}

pub(crate) fn stage_grid<T: Element>(
    g: &mut Graph<T>,
    blocks: &[PvtBlock],
    mut x: Var,
    rows: usize,
    cols: usize,
    sr: usize,
) -> Result<Var> {
    if sr == 0 || rows % sr != 0 || cols % sr != 0 {
        return Err(Error::Geometry(vec![format!(
            "resolution {rows}x{cols} not divisible by sr window {sr}"
        )]));
    }
    let segments = Arc::new(window_segments(rows, cols, sr));
    for blk in blocks {
        x = blk.forward(g, x, |g, xn| {
            if sr == 1 {
                Ok(xn)
            } else {
                g.tape.segment_mean(xn, segments.clone())
            }
        })?;
    }
    Ok(x)
}

/// Pooling matrix averaging the visible tokens of every `sr × sr` window.
fn masked_pool_matrix<T: Element>(tm: &TokenMap, sr: usize) -> Result<Tensor<T>> {
    let (rows, cols) = (tm.full_rows, tm.full_cols);
    let segs = window_segments(rows, cols, sr);
    let n = rows * cols;
    let mut data = vec![T::zero(); segs.len() * n];
    for (w, seg) in segs.iter().enumerate() {
        let vis: Vec<usize> = seg.iter().copied().filter(|&i| tm.visible[i]).collect();
        if vis.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "spatial-reduction window {w} holds no visible token"
            )));
        }
        let wgt = T::one() / T::from_usize(vis.len()).expect("count");
        for i in vis {
            data[w * n + i] = wgt;
        }
    }
    Tensor::new(vec![segs.len(), n], data)
}

pub(crate) fn stage_full_masked<T: Element>(g: &mut Graph<T>, blocks: &[PvtBlock], mut x: Var, tm: &TokenMap, sr: usize) -> Result<Var> {
    if sr == 0 || tm.full_rows % sr != 0 || tm.full_cols % sr != 0 {
        return Err(Error::Geometry(vec![format!(
            "resolution {}x{} not divisible by sr window {sr}",
            tm.full_rows, tm.full_cols
        )]));
    }
    let pool = masked_pool_matrix::<T>(tm, sr)?;
    for blk in blocks {
        let pool = pool.clone();
        x = blk.forward(g, x, |g, xn| {
            let p = g.tape.constant(pool)?;
            g.tape.matmul(p, xn)
        })?;
        x = zero_placeholders(g, x, &tm.visible)?;
    }
    Ok(x)
}
