//! Stage bookkeeping shared by both encoder families.
//!
//! The token grid after patch embedding has `tpp = patch_size / embed_stride`
//! tokens per patch edge. Each stage halves the resolution, so stage `s`
//! holds `tpp >> s` tokens per patch edge. Stages with at least one token per
//! patch are *patch-local*: every token lies inside a single patch, which is
//! what makes the full-masked route well defined there.

use crate::masking::{CompactMap, PatchGrid};
use crate::{Error, Result};

pub fn tokens_per_patch(patch_size: usize, embed_stride: usize) -> Result<usize> {
    if embed_stride == 0 || patch_size % embed_stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "embed stride {embed_stride} does not divide patch size {patch_size}"
        )));
    }
    let tpp = patch_size / embed_stride;
    if !tpp.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "tokens per patch edge {tpp} is not a power of two"
        )));
    }
    Ok(tpp)
}

/// Number of leading patch-local stages.
pub fn local_stages(tpp: usize, stages: usize) -> usize {
    (tpp.trailing_zeros() as usize + 1).min(stages)
}

/// Sub-pixel factor that takes the final stage back to one token per patch.
pub fn shuffle_factor(tpp: usize, stages: usize) -> Result<usize> {
    let stride = 1usize << (stages.saturating_sub(1));
    if stride < tpp || stride % tpp != 0 {
        return Err(Error::InvalidArgument(format!(
            "{stages} stages reduce by {stride}, which cannot return to one token per patch ({tpp} per edge)"
        )));
    }
    Ok(stride / tpp)
}

/// Token-level view of a one-per-cell plan at a patch-local stage.
#[derive(Debug, Clone)]
pub struct TokenMap {
    pub full_rows: usize,
    pub full_cols: usize,
    pub compact_rows: usize,
    pub compact_cols: usize,
    /// Compact token (raster) → full token (raster).
    pub compact_to_full: Vec<usize>,
    /// Per full token: whether its patch is kept.
    pub visible: Vec<bool>,
}

impl TokenMap {
    /// `t` tokens per patch edge.
    pub fn new(grid: &PatchGrid, map: &CompactMap, t: usize) -> Self {
        let (fr, fc) = (grid.rows * t, grid.cols * t);
        let (cr, cc) = (map.compact_rows * t, map.compact_cols * t);
        let mut compact_to_full = Vec::with_capacity(cr * cc);
        let mut visible = vec![false; fr * fc];
        for cy in 0..cr {
            for cx in 0..cc {
                let cell = (cy / t) * map.compact_cols + cx / t;
                let (pr, pc) = grid.coords(map.to_compact[cell]);
                let f = (pr * t + cy % t) * fc + pc * t + cx % t;
                compact_to_full.push(f);
                visible[f] = true;
            }
        }
        TokenMap {
            full_rows: fr,
            full_cols: fc,
            compact_rows: cr,
            compact_cols: cc,
            compact_to_full,
            visible,
        }
    }
}

/// Maps a full-space coordinate inside a cell-aligned region to the
/// coordinate of the same token once every cell keeps a single patch:
/// `(y / 2t)·t + y mod t`.
pub fn compact_coord(y: usize, t: usize) -> usize {
    (y / (2 * t)) * t + y % t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{build_compact_map, sample_uniform};

    #[test]
    fn local_stage_counts() {
        assert_eq!(tokens_per_patch(16, 4).unwrap(), 4);
        assert_eq!(local_stages(4, 4), 3);
        assert_eq!(local_stages(2, 3), 2);
        assert_eq!(local_stages(1, 4), 1);
        assert_eq!(shuffle_factor(4, 4).unwrap(), 2);
        assert_eq!(shuffle_factor(2, 3).unwrap(), 2);
        assert!(shuffle_factor(4, 2).is_err());
        assert!(tokens_per_patch(16, 3).is_err());
        assert!(tokens_per_patch(12, 4).is_err());
    }

    #[test]
    fn token_map_is_injective_and_matches_visibility() {
        let grid = PatchGrid::new(4, 6, 8).unwrap();
        let plan = sample_uniform(grid, 4).unwrap();
        let map = build_compact_map(&plan).unwrap();
        for t in [1, 2, 4] {
            let tm = TokenMap::new(&grid, &map, t);
            let mut seen = tm.compact_to_full.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), tm.compact_to_full.len());
            assert_eq!(tm.visible.iter().filter(|&&v| v).count(), seen.len());
            assert_eq!(tm.compact_to_full.len() * 4, tm.full_rows * tm.full_cols);
        }
    }

    #[test]
    fn compact_coordinates() {
        // t = 2: cells are 4 tokens wide, each contributing 2 compact tokens.
        let got: Vec<usize> = (0..8).map(|y| compact_coord(y, 2)).collect();
        assert_eq!(got, vec![0, 1, 0, 1, 2, 3, 2, 3]);
    }
}
