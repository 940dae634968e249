use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::geometry::{compact_coord, local_stages, TokenMap};
use super::{check_common, default_bias, full_extents, zero_placeholders, Space, StageSpec};
use crate::masking::PatchGrid;
use crate::nn::{attention_macs, multi_head_attention, BiasMode, Init, LayerNorm, Linear, Mlp};
use crate::numerics::{Element, Graph, ParamId, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwinConfig {
    pub patch_size: usize,
    pub embed_stride: usize,
    pub mlp_ratio: usize,
    /// Full-space window edge at stage 0, in stage-0 tokens. Later
    /// patch-local stages halve it along with the resolution.
    pub window: usize,
    /// Full-space cyclic shift at stage 0.
    pub shift: usize,
    #[serde(default = "default_bias")]
    pub bias: BiasMode,
    pub stages: Vec<StageSpec>,
}

impl Default for SwinConfig {
    fn default() -> Self {
        let stage = |dim, heads| StageSpec {
            depth: 2,
            dim,
            heads,
        };
        SwinConfig {
            patch_size: 16,
            embed_stride: 4,
            mlp_ratio: 4,
            window: 16,
            shift: 8,
            bias: BiasMode::Off,
            stages: vec![stage(32, 1), stage(64, 2), stage(128, 4), stage(256, 8)],
        }
    }
}

/// Unclamped full-space window and shift of stage `s`.
fn nominal(cfg: &SwinConfig, local: usize, s: usize) -> (usize, usize) {
    let k = s.min(local.saturating_sub(1));
    (cfg.window >> k, cfg.shift >> k)
}

/// Window edge and shift used on a `rows × cols` grid. A window that covers
/// the smaller extent is clamped to it and disables shifting.
pub(crate) fn stage_window(cfg: &SwinConfig, local: usize, s: usize, space: Space, rows: usize, cols: usize) -> (usize, usize) {
    let (mut w, mut sh) = nominal(cfg, local, s);
    if space == Space::Compact {
        w /= 2;
        sh /= 2;
    }
    let w = w.max(1);
    let m = rows.min(cols);
    if m <= w {
        (m, 0)
    } else {
        (w, sh)
    }
}

pub fn validate_swin_geometry(cfg: &SwinConfig, grid: &PatchGrid) -> Vec<String> {
    let mut out = Vec::new();
    let Some(tpp) = check_common(&cfg.stages, cfg.patch_size, cfg.embed_stride, &mut out) else {
        return out;
    };
    if grid.patch_size != cfg.patch_size {
        out.push(format!(
            "grid patch size {} differs from encoder patch size {}",
            grid.patch_size, cfg.patch_size
        ));
    }
    let unit = 4 * tpp;
    if cfg.window == 0 || cfg.window % unit != 0 || !(cfg.window / unit).is_power_of_two() {
        out.push(format!("window {} is not of the form {unit}·2^n", cfg.window));
    }
    if cfg.shift * 2 != cfg.window {
        out.push(format!("shift must be half window (window {}, shift {})", cfg.window, cfg.shift));
    }
    if !out.is_empty() {
        return out;
    }
    let ext = full_extents(grid, tpp, cfg.stages.len(), &mut out);
    let local = local_stages(tpp, cfg.stages.len());
    for (s, (st, &(fr, fc))) in cfg.stages.iter().zip(&ext).enumerate() {
        for (space, r, c) in [(Space::Full, fr, fc), (Space::Compact, fr / 2, fc / 2)] {
            let (w, sh) = stage_window(cfg, local, s, space, r, c);
            let name = if space == Space::Full { "full" } else { "compact" };
            if r % w != 0 || c % w != 0 {
                out.push(format!("stage {s}: {name} grid {r}x{c} not divisible by window {w}"));
            }
            if space == Space::Full && sh > 0 && st.depth % 2 != 0 {
                out.push(format!("stage {s}: depth {} must be even when shifting", st.depth));
            }
        }
    }
    out
}

/// Window membership of one (possibly shifted) partition.
#[derive(Debug, Clone)]
pub struct WindowPartition {
    pub window: usize,
    pub shift: usize,
    /// Raster token indices of each window, in window-local raster order of
    /// the shifted grid.
    pub windows: Vec<Vec<usize>>,
    /// Shifted-grid region label of each window member.
    pub regions: Vec<Vec<u8>>,
    /// Window-local `(y, x)` of each member.
    pub local: Vec<Vec<(usize, usize)>>,
}

impl WindowPartition {
    /// Pairs `(i, j)` of window `w` that share a region, row-major `T × T`.
    /// `None` when the whole window is one region.
    fn region_keep(&self, w: usize) -> Option<Vec<bool>> {
        let r = &self.regions[w];
        if r.iter().all(|&v| v == r[0]) {
            return None;
        }
        Some(r.iter().flat_map(|&a| r.iter().map(move |&b| a == b)).collect())
    }

    /// Number of distinct regions over all windows.
    pub fn region_count(&self) -> usize {
        self.regions
            .iter()
            .map(|r| {
                let mut v = r.clone();
                v.sort_unstable();
                v.dedup();
                v.len()
            })
            .sum()
    }
}

/// Partition of a `rows × cols` grid into `window × window` windows after a
/// cyclic shift by `-shift` along both axes. Shifted-grid rows in
/// `[0, rows − window)`, `[rows − window, rows − shift)`, `[rows − shift, rows)`
/// form the three row regions (columns alike).
pub fn swin_partition(rows: usize, cols: usize, window: usize, shift: usize) -> WindowPartition {
    let band = |v: usize, n: usize| -> u8 {
        if shift == 0 || v < n - window {
            0
        } else if v < n - shift {
            1
        } else {
            2
        }
    };
    let (wr, wc) = (rows / window, cols / window);
    let mut windows = Vec::with_capacity(wr * wc);
    let mut regions = Vec::with_capacity(wr * wc);
    let mut local = Vec::with_capacity(wr * wc);
    for wy in 0..wr {
        for wx in 0..wc {
            let mut members = Vec::with_capacity(window * window);
            let mut reg = Vec::with_capacity(window * window);
            let mut loc = Vec::with_capacity(window * window);
            for a in 0..window {
                for b in 0..window {
                    let (ry, rx) = (wy * window + a, wx * window + b);
                    let (y, x) = ((ry + shift) % rows, (rx + shift) % cols);
                    members.push(y * cols + x);
                    reg.push(band(ry, rows) * 3 + band(rx, cols));
                    loc.push((a, b));
                }
            }
            windows.push(members);
            regions.push(reg);
            local.push(loc);
        }
    }
    WindowPartition {
        window,
        shift,
        windows,
        regions,
        local,
    }
}

#[derive(Debug, Clone)]
pub(crate) struct SwinBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    mlp: Mlp,
    heads: usize,
    dim: usize,
    shifted: bool,
    /// `[heads · (2W − 1)²]` table and its nominal full-space window `W`.
    bias: Option<(ParamId, usize)>,
    bias_mode: BiasMode,
}

pub(crate) fn build(cfg: &SwinConfig, init: &mut Init, prefix: &str, tpp: usize) -> Result<Vec<Vec<SwinBlock>>> {
    let local = local_stages(tpp, cfg.stages.len());
    let mut stages = Vec::with_capacity(cfg.stages.len());
    for (s, st) in cfg.stages.iter().enumerate() {
        let d = st.dim;
        let (w, _) = nominal(cfg, local, s);
        let mut blocks = Vec::with_capacity(st.depth);
        for b in 0..st.depth {
            let p = format!("{prefix}.stage{s}.block{b}");
            let bias = if cfg.bias == BiasMode::Off {
                None
            } else {
                let span = 2 * w - 1;
                Some((init.normal(&format!("{p}.attn.rel_bias"), &[st.heads * span * span], 0.02)?, w))
            };
            blocks.push(SwinBlock {
                norm1: LayerNorm::new(init, &format!("{p}.norm1"), d)?,
                qkv: Linear::new(init, &format!("{p}.attn.qkv"), d, 3 * d, true)?,
                proj: Linear::new(init, &format!("{p}.attn.proj"), d, d, true)?,
                norm2: LayerNorm::new(init, &format!("{p}.norm2"), d)?,
                mlp: Mlp::new(init, &format!("{p}.mlp"), d, d * cfg.mlp_ratio)?,
                heads: st.heads,
                dim: d,
                shifted: b % 2 == 1,
                bias,
                bias_mode: cfg.bias,
            });
        }
        stages.push(blocks);
    }
    Ok(stages)
}

/// Per-window attention inputs: key support and local coordinates used for
/// the relative-position table.
struct WindowPlan<'a> {
    part: &'a WindowPartition,
    keep: Vec<Option<Vec<bool>>>,
    coords: Vec<Vec<(usize, usize)>>,
}

impl SwinBlock {
    fn bias_vars<T: Element>(&self, g: &mut Graph<T>, coords: &[(usize, usize)]) -> Result<Option<Vec<Var>>> {
        let Some((table, w)) = self.bias else {
            return Ok(None);
        };
        let span = 2 * w - 1;
        let tab = g.param(table)?;
        let t = coords.len();
        let mut out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut idx = Vec::with_capacity(t * t);
            for &(yi, xi) in coords {
                for &(yj, xj) in coords {
                    let dy = yi + w - 1 - yj;
                    let dx = xi + w - 1 - xj;
                    idx.push(h * span * span + dy * span + dx);
                }
            }
            out.push(g.tape.gather(tab, Arc::new(idx), &[t, t])?);
        }
        Ok(Some(out))
    }

    fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var, plan: &WindowPlan) -> Result<Var> {
        let d = self.dim;
        let xn = self.norm1.forward(g, x)?;
        let qkv = self.qkv.forward(g, xn)?;
        let q = g.tape.slice_cols(qkv, 0, d)?;
        let k = g.tape.slice_cols(qkv, d, d)?;
        let v = g.tape.slice_cols(qkv, 2 * d, d)?;
        let n = g.tape.shape(x)[0];
        let mut outs = Vec::with_capacity(plan.part.windows.len());
        let mut order = Vec::with_capacity(n);
        let mut shared_bias: Option<Option<Vec<Var>>> = None;
        for (w, members) in plan.part.windows.iter().enumerate() {
            let rows = Arc::new(members.clone());
            let qw = g.tape.gather_rows(q, rows.clone())?;
            let kw = g.tape.gather_rows(k, rows.clone())?;
            let vw = g.tape.gather_rows(v, rows)?;
            let bias = if plan.coords.len() == 1 {
                if shared_bias.is_none() {
                    shared_bias = Some(self.bias_vars(g, &plan.coords[0])?);
                }
                shared_bias.clone().expect("set above")
            } else {
                self.bias_vars(g, &plan.coords[w])?
            };
            outs.push(multi_head_attention(g, qw, kw, vw, self.heads, plan.keep[w].as_deref(), bias.as_deref())?);
            order.extend_from_slice(members);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.tape.concat_rows(&outs)? };
        let mut inverse = vec![0; n];
        for (pos, &tok) in order.iter().enumerate() {
            inverse[tok] = pos;
        }
        let a = g.tape.gather_rows(cat, Arc::new(inverse))?;
        let a = self.proj.forward(g, a)?;
        let x = g.tape.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.mlp.forward(g, h)?;
        g.tape.add(x, h)
    }

    pub(crate) fn macs(&self, rows: usize, cols: usize, window: usize, _shift: usize) -> u64 {
        let n = rows * cols;
        let t = window * window;
        let windows = n / t;
        self.qkv.macs(n) + self.proj.macs(n) + self.mlp.macs(n) + windows as u64 * attention_macs(t, t, self.dim)
    }

    fn shift_for(&self, shift: usize) -> usize {
        if self.shifted {
            shift
        } else {
            0
        }
    }
}

pub(crate) fn stage_grid<T: Element>(g: &mut Graph<T>, blocks: &[SwinBlock], mut x: Var, rows: usize, cols: usize, window: usize, shift: usize) -> Result<Var> {
    if window == 0 || rows % window != 0 || cols % window != 0 {
        return Err(Error::Geometry(vec![format!("grid {rows}x{cols} not divisible by window {window}")]));
    }
    for blk in blocks {
        let part = swin_partition(rows, cols, window, blk.shift_for(shift));
        let keep = (0..part.windows.len()).map(|w| part.region_keep(w)).collect();
        let plan = WindowPlan {
            coords: vec![part.local[0].clone()],
            part: &part,
            keep,
        };
        x = blk.forward(g, x, &plan)?;
    }
    Ok(x)
}

pub(crate) fn stage_full_masked<T: Element>(
    g: &mut Graph<T>,
    blocks: &[SwinBlock],
    mut x: Var,
    tm: &TokenMap,
    window: usize,
    shift: usize,
    t: usize,
) -> Result<Var> {
    let (rows, cols) = (tm.full_rows, tm.full_cols);
    if window == 0 || rows % window != 0 || cols % window != 0 {
        return Err(Error::Geometry(vec![format!("grid {rows}x{cols} not divisible by window {window}")]));
    }
    for blk in blocks {
        let part = swin_partition(rows, cols, window, blk.shift_for(shift));
        let mut keep = Vec::with_capacity(part.windows.len());
        for (w, members) in part.windows.iter().enumerate() {
            let r = &part.regions[w];
            if !members.iter().any(|&m| tm.visible[m]) {
                return Err(Error::InvalidArgument(format!("attention window {w} holds no visible token")));
            }
            let mut k = Vec::with_capacity(members.len() * members.len());
            for i in 0..members.len() {
                for (j, &mj) in members.iter().enumerate() {
                    k.push(tm.visible[mj] && r[i] == r[j]);
                }
            }
            keep.push(Some(k));
        }
        let coords = match blk.bias_mode {
            BiasMode::Compact => part
                .local
                .iter()
                .map(|loc| loc.iter().map(|&(y, x)| (compact_coord(y, t), compact_coord(x, t))).collect())
                .collect(),
            BiasMode::Off | BiasMode::FullSpace => vec![part.local[0].clone()],
        };
        let plan = WindowPlan {
            part: &part,
            keep,
            coords,
        };
        x = blk.forward(g, x, &plan)?;
        x = zero_placeholders(g, x, &tm.visible)?;
    }
    Ok(x)
}
