//! Mask plans on a patch grid.
//!
//! All index spaces are raster (row-major). A full-grid patch `(r, c)` has
//! index `r·cols + c` and belongs to cell `(r/2, c/2)`; the compact grid has
//! one position per cell, also in raster order.

mod validate;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

pub use validate::{validate_plan, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    /// A grid with even, non-zero extents.
    pub fn new(rows: usize, cols: usize, patch_size: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || rows % 2 != 0 || cols % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch grid {rows}x{cols} must have even, non-zero extents"
            )));
        }
        if patch_size == 0 {
            return Err(Error::InvalidArgument("patch size must be positive".into()));
        }
        Ok(PatchGrid {
            rows,
            cols,
            patch_size,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }

    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx / self.cols, idx % self.cols)
    }

    pub fn compact_rows(&self) -> usize {
        self.rows / 2
    }

    pub fn compact_cols(&self) -> usize {
        self.cols / 2
    }

    /// Raster index of the cell holding patch `idx`.
    pub fn cell_of(&self, idx: usize) -> usize {
        let (r, c) = self.coords(idx);
        (r / 2) * self.compact_cols() + c / 2
    }

    /// The four patch indices of cell `(i, j)`, top-left first.
    pub fn cell_members(&self, i: usize, j: usize) -> [usize; 4] {
        let (r, c) = (2 * i, 2 * j);
        [
            self.index(r, c),
            self.index(r, c + 1),
            self.index(r + 1, c),
            self.index(r + 1, c + 1),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Random sampling without replacement at a given mask ratio.
    Rs,
    /// Fixed top-left corner of every 2×2 cell.
    Gs,
    /// One uniformly random position per 2×2 cell.
    Us,
    /// Uniform sampling followed by secondary masking.
    Um,
}

impl Strategy {
    pub fn one_per_cell(self) -> bool {
        !matches!(self, Strategy::Rs)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Rs => "rs",
            Strategy::Gs => "gs",
            Strategy::Us => "us",
            Strategy::Um => "um",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rs" => Ok(Strategy::Rs),
            "gs" => Ok(Strategy::Gs),
            "us" => Ok(Strategy::Us),
            "um" => Ok(Strategy::Um),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy {other:?} (expected rs, gs, us or um)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Partition of a patch grid into kept, secondary-masked and dropped patches.
///
/// `kept` and `sm_masked` are sorted ascending; `dropped` is derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub grid: PatchGrid,
    pub strategy: Strategy,
    pub seed: u64,
    pub sm_ratio: f64,
    pub kept: Vec<usize>,
    pub sm_masked: Vec<usize>,
}

/// `round(x)` with halves rounded up.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

impl MaskPlan {
    pub fn dropped(&self) -> Vec<usize> {
        let keep = self.kept_flags();
        (0..self.grid.len()).filter(|&i| !keep[i]).collect()
    }

    pub fn kept_flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.grid.len()];
        for &k in &self.kept {
            if k < f.len() {
                f[k] = true;
            }
        }
        f
    }

    pub fn sm_flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.grid.len()];
        for &k in &self.sm_masked {
            if k < f.len() {
                f[k] = true;
            }
        }
        f
    }

    /// Kept patches that are not secondary-masked.
    pub fn visible(&self) -> Vec<usize> {
        let sm = self.sm_flags();
        self.kept.iter().copied().filter(|&k| !sm[k]).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One gray level per patch: kept 255, secondary-masked 128, dropped 0.
    pub fn levels(&self) -> Vec<u8> {
        let keep = self.kept_flags();
        let sm = self.sm_flags();
        (0..self.grid.len())
            .map(|i| match (keep[i], sm[i]) {
                (_, true) => 128,
                (true, false) => 255,
                (false, false) => 0,
            })
            .collect()
    }

    /// Kept-patch counts of every non-overlapping `w × w` window, raster order.
    pub fn window_counts(&self, w: usize) -> Result<Vec<usize>> {
        let g = self.grid;
        if w == 0 || g.rows % w != 0 || g.cols % w != 0 {
            return Err(Error::InvalidArgument(format!(
                "window {w} does not tile a {}x{} grid",
                g.rows, g.cols
            )));
        }
        let (wr, wc) = (g.rows / w, g.cols / w);
        let mut counts = vec![0; wr * wc];
        for &k in &self.kept {
            let (r, c) = g.coords(k);
            counts[(r / w) * wc + c / w] += 1;
        }
        Ok(counts)
    }
}

fn plan(grid: PatchGrid, strategy: Strategy, seed: u64, mut kept: Vec<usize>) -> MaskPlan {
    kept.sort_unstable();
    MaskPlan {
        grid,
        strategy,
        seed,
        sm_ratio: 0.0,
        kept,
        sm_masked: Vec::new(),
    }
}

pub fn sample_random(grid: PatchGrid, mask_ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {mask_ratio} must lie in (0, 1)"
        )));
    }
    let n = grid.len();
    let keep = round_half_up(n as f64 * (1.0 - mask_ratio));
    if keep == 0 {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {mask_ratio} keeps no patch of {n}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Sampling, 0);
    let kept = sample(&mut rng, n, keep.min(n)).into_vec();
    Ok(plan(grid, Strategy::Rs, seed, kept))
}

fn check_even(grid: PatchGrid) -> Result<()> {
    if grid.rows % 2 != 0 || grid.cols % 2 != 0 || grid.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "grid {}x{} is not tiled by 2x2 cells",
            grid.rows, grid.cols
        )));
    }
    Ok(())
}

/// The seed is accepted for interface uniformity and recorded in the plan.
pub fn sample_grid(grid: PatchGrid, seed: u64) -> Result<MaskPlan> {
    check_even(grid)?;
    let kept = (0..grid.compact_rows())
        .flat_map(|i| (0..grid.compact_cols()).map(move |j| grid.cell_members(i, j)[0]))
        .collect();
    Ok(plan(grid, Strategy::Gs, seed, kept))
}

pub fn sample_uniform(grid: PatchGrid, seed: u64) -> Result<MaskPlan> {
    check_even(grid)?;
    let mut rng = stream_rng(seed, Stream::Sampling, 0);
    let mut kept = Vec::with_capacity(grid.len() / 4);
    for i in 0..grid.compact_rows() {
        for j in 0..grid.compact_cols() {
            kept.push(grid.cell_members(i, j)[rng.random_range(0..4)]);
        }
    }
    Ok(plan(grid, Strategy::Us, seed, kept))
}

/// Turns a US plan into a UM plan by masking `round(sm_ratio·|kept|)` kept
/// patches chosen uniformly at random.
pub fn apply_secondary_mask(plan: &MaskPlan, sm_ratio: f64, seed: u64) -> Result<MaskPlan> {
    if plan.strategy != Strategy::Us {
        return Err(Error::InvalidArgument(format!(
            "secondary masking applies to us plans, got {}",
            plan.strategy
        )));
    }
    if !(0.0..1.0).contains(&sm_ratio) {
        return Err(Error::InvalidArgument(format!(
            "sm ratio {sm_ratio} must lie in [0, 1)"
        )));
    }
    let count = round_half_up(sm_ratio * plan.kept.len() as f64);
    let mut rng = stream_rng(seed, Stream::SecondaryMask, 0);
    let mut sm: Vec<usize> = sample(&mut rng, plan.kept.len(), count)
        .into_iter()
        .map(|i| plan.kept[i])
        .collect();
    sm.sort_unstable();
    Ok(MaskPlan {
        strategy: Strategy::Um,
        sm_ratio,
        sm_masked: sm,
        ..plan.clone()
    })
}

/// Strategy and ratios from which a fresh plan can be drawn for any seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub strategy: Strategy,
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    #[serde(default)]
    pub sm_ratio: f64,
}

fn default_mask_ratio() -> f64 {
    0.75
}

impl MaskSpec {
    pub fn new(strategy: Strategy, mask_ratio: f64, sm_ratio: f64) -> Result<Self> {
        let spec = MaskSpec {
            strategy,
            mask_ratio,
            sm_ratio,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if self.sm_ratio != 0.0 && self.strategy != Strategy::Um {
            return Err(Error::InvalidArgument("sm-ratio requires um".into()));
        }
        Ok(())
    }

    pub fn draw(&self, grid: PatchGrid, seed: u64) -> Result<MaskPlan> {
        self.check()?;
        match self.strategy {
            Strategy::Rs => sample_random(grid, self.mask_ratio, seed),
            Strategy::Gs => sample_grid(grid, seed),
            Strategy::Us => sample_uniform(grid, seed),
            Strategy::Um => apply_secondary_mask(&sample_uniform(grid, seed)?, self.sm_ratio, seed),
        }
    }
}

/// Bidirectional map between kept full-grid patches and compact positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompactMap {
    /// Compact position `k` → full-grid index.
    pub to_compact: Vec<usize>,
    /// Full-grid index → compact position, for kept patches only.
    pub to_full: Vec<Option<usize>>,
    pub compact_rows: usize,
    pub compact_cols: usize,
}

impl CompactMap {
    pub fn len(&self) -> usize {
        self.to_compact.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_compact.is_empty()
    }
}

pub fn build_compact_map(plan: &MaskPlan) -> Result<CompactMap> {
    let g = plan.grid;
    check_even(g)?;
    let keep = plan.kept_flags();
    let mut to_compact = Vec::with_capacity(g.len() / 4);
    let mut to_full = vec![None; g.len()];
    for i in 0..g.compact_rows() {
        for j in 0..g.compact_cols() {
            let members = g.cell_members(i, j);
            let hits: Vec<usize> = members.into_iter().filter(|&m| keep[m]).collect();
            if hits.len() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "cell ({i}, {j}) holds {} kept patches {:?}; a compact map needs exactly one",
                    hits.len(),
                    hits
                )));
            }
            to_full[hits[0]] = Some(to_compact.len());
            to_compact.push(hits[0]);
        }
    }
    if plan.kept.iter().any(|&k| k >= g.len()) || plan.kept.len() != to_compact.len() {
        return Err(Error::InvalidArgument(
            "kept set is inconsistent with its grid".into(),
        ));
    }
    Ok(CompactMap {
        to_compact,
        to_full,
        compact_rows: g.compact_rows(),
        compact_cols: g.compact_cols(),
    })
}

/// Secondary-mask flags in compact order.
pub fn compact_sm_flags(plan: &MaskPlan, map: &CompactMap) -> Vec<bool> {
    let sm = plan.sm_flags();
    map.to_compact.iter().map(|&f| sm[f]).collect()
}
