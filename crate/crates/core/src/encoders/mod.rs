//! Miniature pyramid encoders.
//!
//! Both families share one skeleton: a non-overlapping patch embedding with
//! stride `embed_stride`, then stages separated by 2×2 patch merging, then a
//! final layer norm. They differ in the token mixer of each block:
//!
//! - [`EncoderConfig::Pvt`]: every token queries keys and values mean-pooled over
//!   non-overlapping spatial-reduction windows (global attention over the
//!   pooled set).
//! - [`EncoderConfig::Swin`]: attention inside non-overlapping local windows, with a
//!   half-window cyclic shift on every other block.
//!
//! Each encoder offers three routes:
//!
//! - [`Encoder::forward_grid`] with [`Space::Compact`] runs on the packed
//!   quarter-area input (the production route).
//! - [`Encoder::forward_grid`] with [`Space::Full`] runs on the whole grid
//!   with full-space geometry (used by the mask-token baseline).
//! - [`Encoder::forward_full_masked`] runs on the whole grid with placeholders
//!   at unkept patches. Placeholders are zero, never enter any pooling window
//!   or attention support, and are re-zeroed after every block. Once the
//!   stages stop being patch-local the visible tokens are gathered into
//!   compact order and the remaining stages run on the compact route; the
//!   per-stage traces are therefore directly comparable with the compact
//!   route.

mod geometry;
mod pvt;
mod swin;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::masking::{CompactMap, PatchGrid};
use crate::nn::{BiasMode, Init, LayerNorm, Linear};
use crate::numerics::{Element, Graph, ParamStore, Tensor, Var};
use crate::patchio::{patchify, Image};
use crate::{Error, Result};

pub use geometry::{compact_coord, local_stages, shuffle_factor, tokens_per_patch, TokenMap};
pub use pvt::{validate_pvt_geometry, window_segments, PvtConfig, PvtStage};
pub use swin::{swin_partition, validate_swin_geometry, SwinConfig, WindowPartition};

/// Depth, width and head count of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Compact,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum EncoderConfig {
    Pvt(PvtConfig),
    Swin(SwinConfig),
}

impl EncoderConfig {
    pub fn patch_size(&self) -> usize {
        match self {
            EncoderConfig::Pvt(c) => c.patch_size,
            EncoderConfig::Swin(c) => c.patch_size,
        }
    }

    pub fn embed_stride(&self) -> usize {
        match self {
            EncoderConfig::Pvt(c) => c.embed_stride,
            EncoderConfig::Swin(c) => c.embed_stride,
        }
    }

    pub fn mlp_ratio(&self) -> usize {
        match self {
            EncoderConfig::Pvt(c) => c.mlp_ratio,
            EncoderConfig::Swin(c) => c.mlp_ratio,
        }
    }

    pub fn stage_specs(&self) -> Vec<StageSpec> {
        match self {
            EncoderConfig::Pvt(c) => c
                .stages
                .iter()
                .map(|s| StageSpec {
                    depth: s.depth,
                    dim: s.dim,
                    heads: s.heads,
                })
                .collect(),
            EncoderConfig::Swin(c) => c.stages.clone(),
        }
    }

    pub fn tokens_per_patch(&self) -> Result<usize> {
        tokens_per_patch(self.patch_size(), self.embed_stride())
    }

    pub fn final_dim(&self) -> usize {
        self.stage_specs().last().map_or(0, |s| s.dim)
    }

    pub fn arch_name(&self) -> &'static str {
        match self {
            EncoderConfig::Pvt(_) => "pvt",
            EncoderConfig::Swin(_) => "swin",
        }
    }

    /// Geometry violations for `grid`; empty when both routes are defined.
    pub fn validate(&self, grid: &PatchGrid) -> Vec<String> {
        match self {
            EncoderConfig::Pvt(c) => validate_pvt_geometry(c, grid),
            EncoderConfig::Swin(c) => validate_swin_geometry(c, grid),
        }
    }

    pub fn check(&self, grid: &PatchGrid) -> Result<()> {
        let v = self.validate(grid);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Geometry(v))
        }
    }
}

pub(crate) fn check_common(specs: &[StageSpec], patch_size: usize, embed_stride: usize, out: &mut Vec<String>) -> Option<usize> {
    if specs.is_empty() {
        out.push("at least one stage is required".into());
    }
    for (s, st) in specs.iter().enumerate() {
        if st.heads == 0 || st.dim % st.heads != 0 {
            out.push(format!("stage {s}: dim {} not divisible by {} heads", st.dim, st.heads));
        }
        if st.depth == 0 {
            out.push(format!("stage {s}: depth must be positive"));
        }
    }
    match tokens_per_patch(patch_size, embed_stride) {
        Ok(t) => Some(t),
        Err(e) => {
            out.push(e.to_string());
            None
        }
    }
}

/// Stage-wise extents of the full-space token grid; checks that every stage
/// and its compact counterpart have integral resolution.
pub(crate) fn full_extents(grid: &PatchGrid, tpp: usize, stages: usize, out: &mut Vec<String>) -> Vec<(usize, usize)> {
    let (r0, c0) = (grid.rows * tpp, grid.cols * tpp);
    let mut ext = Vec::with_capacity(stages);
    for s in 0..stages {
        let div = 1usize << (s + 1);
        if r0 % div != 0 || c0 % div != 0 {
            out.push(format!(
                "stage {s}: token grid {r0}x{c0} cannot be reduced {} times with a compact counterpart",
                s
            ));
        }
        ext.push((r0 >> s, c0 >> s));
    }
    ext
}

/// Patch merging between stages: concatenation of each 2×2 group, in the
/// order (0,0), (0,1), (1,0), (1,1), followed by a linear map and a norm.
#[derive(Debug, Clone)]
pub struct Merge {
    pub reduction: Linear,
    pub norm: LayerNorm,
}

impl Merge {
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let d = g.tape.shape(x)[1];
        let idx = merge_index(rows, cols, d);
        let grouped = g.tape.gather(x, Arc::new(idx), &[(rows / 2) * (cols / 2), 4 * d])?;
        let y = self.reduction.forward(g, grouped)?;
        self.norm.forward(g, y)
    }
}

pub fn merge_index(rows: usize, cols: usize, d: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(rows * cols * d);
    for i in 0..rows / 2 {
        for j in 0..cols / 2 {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let t = (2 * i + dy) * cols + 2 * j + dx;
                idx.extend(t * d..(t + 1) * d);
            }
        }
    }
    idx
}

/// Activations of one stage, in compact raster order when produced by the
/// full-masked route.
#[derive(Debug, Clone, Copy)]
pub struct StageTrace {
    pub value: Var,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[rows·cols, final_dim]` after the final norm.
    pub tokens: Var,
    pub rows: usize,
    pub cols: usize,
    pub traces: Vec<StageTrace>,
    /// Tokens entering the first stage.
    pub input_tokens: usize,
    /// Tokens processed per stage.
    pub stage_tokens: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Blocks {
    Pvt(Vec<Vec<pvt::PvtBlock>>),
    Swin(Vec<Vec<swin::SwinBlock>>),
}

/// Encoder parameters (as ids into a [`ParamStore`]) plus the configuration.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embed: Linear,
    pub merges: Vec<Merge>,
    pub norm: LayerNorm,
    blocks: Blocks,
    tpp: usize,
}

impl Encoder {
    pub fn new(config: &EncoderConfig, init: &mut Init, prefix: &str) -> Result<Self> {
        let tpp = config.tokens_per_patch()?;
        let specs = config.stage_specs();
        if specs.is_empty() {
            return Err(Error::InvalidArgument("encoder needs at least one stage".into()));
        }
        let s = config.embed_stride();
        let embed = Linear::new(init, &format!("{prefix}.patch_embed"), 3 * s * s, specs[0].dim, true)?;
        let mut merges = Vec::new();
        for i in 1..specs.len() {
            merges.push(Merge {
                reduction: Linear::new(
                    init,
                    &format!("{prefix}.stage{i}.merge.reduction"),
                    4 * specs[i - 1].dim,
                    specs[i].dim,
                    false,
                )?,
                norm: LayerNorm::new(init, &format!("{prefix}.stage{i}.merge.norm"), specs[i].dim)?,
            });
        }
        let blocks = match config {
            EncoderConfig::Pvt(c) => Blocks::Pvt(pvt::build(c, init, prefix)?),
            EncoderConfig::Swin(c) => Blocks::Swin(swin::build(c, init, prefix, tpp)?),
        };
        let norm = LayerNorm::new(init, &format!("{prefix}.norm"), config.final_dim())?;
        Ok(Encoder {
            config: config.clone(),
            embed,
            merges,
            norm,
            blocks,
            tpp,
        })
    }

    pub fn tokens_per_patch(&self) -> usize {
        self.tpp
    }

    pub fn stages(&self) -> usize {
        self.merges.len() + 1
    }

    pub fn local_stages(&self) -> usize {
        local_stages(self.tpp, self.stages())
    }

    /// Pixel sub-patches `[H/s · W/s, 3·s²]` feeding the patch embedding.
    pub fn embed_input(&self, img: &Image) -> Result<Tensor<f64>> {
        let s = self.config.embed_stride();
        let grid = PatchGrid {
            rows: img.height / s,
            cols: img.width / s,
            patch_size: s,
        };
        patchify(img, &grid)
    }

    pub fn embed<T: Element>(&self, g: &mut Graph<T>, pixels: Var) -> Result<Var> {
        self.embed.forward(g, pixels)
    }

    fn run_stage<T: Element>(&self, g: &mut Graph<T>, s: usize, x: Var, rows: usize, cols: usize, space: Space) -> Result<Var> {
        match &self.blocks {
            Blocks::Pvt(b) => pvt::stage_grid(g, &b[s], x, rows, cols, self.pvt_sr(s, space)),
            Blocks::Swin(b) => {
                let (w, sh) = self.swin_window(s, space, rows, cols);
                swin::stage_grid(g, &b[s], x, rows, cols, w, sh)
            }
        }
    }

    fn pvt_config(&self) -> &PvtConfig {
        match &self.config {
            EncoderConfig::Pvt(c) => c,
            EncoderConfig::Swin(_) => unreachable!("pvt blocks imply a pvt config"),
        }
    }

    /// Spatial-reduction window of stage `s`.
    pub fn pvt_sr(&self, s: usize, space: Space) -> usize {
        let full = self.pvt_config().stages[s].sr;
        match space {
            Space::Full => full,
            Space::Compact if s < self.local_stages() => full / 2,
            Space::Compact => full,
        }
    }

    /// Window edge and shift of stage `s` on a `rows × cols` grid of `space`.
    pub fn swin_window(&self, s: usize, space: Space, rows: usize, cols: usize) -> (usize, usize) {
        let EncoderConfig::Swin(c) = &self.config else {
            unreachable!("swin blocks imply a swin config")
        };
        swin::stage_window(c, self.local_stages(), s, space, rows, cols)
    }

    /// Forward over a token grid `[rows·cols, dim0]` (already embedded).
    pub fn forward_grid<T: Element>(&self, g: &mut Graph<T>, x: Var, rows: usize, cols: usize, space: Space) -> Result<EncoderOutput> {
        self.forward_from(g, x, rows, cols, space, 0, Vec::new())
    }

    fn forward_from<T: Element>(
        &self,
        g: &mut Graph<T>,
        mut x: Var,
        mut rows: usize,
        mut cols: usize,
        space: Space,
        start: usize,
        mut traces: Vec<StageTrace>,
    ) -> Result<EncoderOutput> {
        let input_tokens = if start == 0 {
            g.tape.shape(x)[0]
        } else {
            traces[0].rows * traces[0].cols
        };
        let n = g.tape.shape(x)[0];
        if n != rows * cols {
            return Err(Error::shape("encoder", format!("{n} tokens for a {rows}x{cols} grid")));
        }
        for s in start..self.stages() {
            if s > 0 {
                x = self.merges[s - 1].forward(g, x, rows, cols)?;
                rows /= 2;
                cols /= 2;
            }
            x = self.run_stage(g, s, x, rows, cols, space)?;
            traces.push(StageTrace { value: x, rows, cols });
        }
        let tokens = self.norm.forward(g, x)?;
        let stage_tokens = traces.iter().map(|t| t.rows * t.cols).collect();
        Ok(EncoderOutput {
            tokens,
            rows,
            cols,
            traces,
            input_tokens,
            stage_tokens,
        })
    }

    /// Full-grid forward with placeholders at unkept patches.
    ///
    /// `x` is the embedded full token grid `[rows·tpp · cols·tpp, dim0]`.
    /// The plan behind `map` must keep exactly one patch per cell.
    pub fn forward_full_masked<T: Element>(&self, g: &mut Graph<T>, x: Var, grid: &PatchGrid, map: &CompactMap) -> Result<EncoderOutput> {
        let local = self.local_stages();
        let mut traces = Vec::with_capacity(self.stages());
        let maps: Vec<TokenMap> = (0..local).map(|s| TokenMap::new(grid, map, self.tpp >> s)).collect();
        let n0 = g.tape.shape(x)[0];
        if n0 != maps[0].full_rows * maps[0].full_cols {
            return Err(Error::shape(
                "forward_full_masked",
                format!("{n0} tokens for a {}x{} grid", maps[0].full_rows, maps[0].full_cols),
            ));
        }
        let mut x = zero_placeholders(g, x, &maps[0].visible)?;
        for s in 0..local {
            let tm = &maps[s];
            if s > 0 {
                let prev = &maps[s - 1];
                x = self.merges[s - 1].forward(g, x, prev.full_rows, prev.full_cols)?;
                x = zero_placeholders(g, x, &tm.visible)?;
            }
            x = match &self.blocks {
                Blocks::Pvt(b) => pvt::stage_full_masked(g, &b[s], x, tm, self.pvt_sr(s, Space::Full))?,
                Blocks::Swin(b) => {
                    let (w, sh) = self.swin_window(s, Space::Full, tm.full_rows, tm.full_cols);
                    let t = self.tpp >> s;
                    swin::stage_full_masked(g, &b[s], x, tm, w, sh, t)?
                }
            };
            let compact = g.tape.gather_rows(x, Arc::new(tm.compact_to_full.clone()))?;
            traces.push(StageTrace {
                value: compact,
                rows: tm.compact_rows,
                cols: tm.compact_cols,
            });
        }
        let last = *traces.last().expect("at least one local stage");
        let mut out = self.forward_from(g, last.value, last.rows, last.cols, Space::Compact, local, traces)?;
        out.input_tokens = n0;
        out.stage_tokens = (0..self.stages())
            .map(|s| if s < local { maps[s].full_rows * maps[s].full_cols } else { out.stage_tokens[s] })
            .collect();
        Ok(out)
    }

    /// Multiply-accumulates of the compact (or full-space) grid route on a
    /// `rows × cols` stage-0 grid, matching the tape's matmul counter.
    pub fn macs(&self, rows: usize, cols: usize, space: Space) -> u64 {
        let specs = self.config.stage_specs();
        let s = self.config.embed_stride();
        let mut total = self.embed.macs(rows * cols);
        let (mut r, mut c) = (rows, cols);
        debug_assert_eq!(self.embed.in_dim, 3 * s * s);
        for st in 0..self.stages() {
            if st > 0 {
                total += self.merges[st - 1].reduction.macs((r / 2) * (c / 2));
                r /= 2;
                c /= 2;
            }
            total += match &self.blocks {
                Blocks::Pvt(b) => b[st]
                    .iter()
                    .map(|blk| blk.macs(r, c, self.pvt_sr(st, space)))
                    .sum::<u64>(),
                Blocks::Swin(b) => {
                    let (w, sh) = self.swin_window(st, space, r, c);
                    b[st].iter().map(|blk| blk.macs(r, c, w, sh)).sum::<u64>()
                }
            };
            debug_assert!(specs[st].dim > 0);
        }
        total
    }
}

/// Multiplies placeholder rows by zero.
pub(crate) fn zero_placeholders<T: Element>(g: &mut Graph<T>, x: Var, visible: &[bool]) -> Result<Var> {
    let d = g.tape.shape(x)[1];
    let mask = Tensor::from_fn(&[visible.len(), d], |i| if visible[i / d] { T::one() } else { T::zero() });
    let m = g.tape.constant(mask)?;
    g.tape.mul(x, m)
}

/// Builds encoder parameters into a fresh f64 store.
pub fn build_encoder(config: &EncoderConfig, seed: u64) -> Result<(Encoder, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let enc = {
        let mut init = Init::new(&mut store, seed);
        Encoder::new(config, &mut init, "encoder")?
    };
    Ok((enc, store))
}

pub(crate) fn default_bias() -> BiasMode {
    BiasMode::Off
}
