use std::collections::BTreeMap;

use serde::Serialize;

use crate::masking::{MaskSpec, PatchGrid};
use crate::rng::{derive_seed, Stream};
use crate::{Error, Result};

/// Distribution of visible patches per non-overlapping window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskStats {
    pub strategy: String,
    pub rows: usize,
    pub cols: usize,
    pub window: usize,
    pub seeds: usize,
    /// Visible count → number of (seed, window) observations.
    pub histogram: BTreeMap<usize, usize>,
    pub mean: f64,
    /// Population variance over all observations.
    pub variance: f64,
    pub min: usize,
    pub max: usize,
}

impl MaskStats {
    pub const CSV_HEADER: &'static str = "strategy,rows,cols,window,seeds,mean,variance,min,max";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.strategy, self.rows, self.cols, self.window, self.seeds, self.mean, self.variance, self.min, self.max
        )
    }
}

/// Visible-count statistics of `seeds` plans drawn from `spec`. Plan `i`
/// uses the seed derived from `(base_seed, i)`.
pub fn mask_stats(spec: &MaskSpec, grid: PatchGrid, window: usize, seeds: usize, base_seed: u64) -> Result<MaskStats> {
    if window == 0 || window % 2 != 0 || grid.rows % window != 0 || grid.cols % window != 0 {
        return Err(Error::InvalidArgument(format!(
            "window {window} must be even and tile the {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    if seeds == 0 {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    let wc = grid.cols / window;
    let mut histogram = BTreeMap::new();
    let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
    for i in 0..seeds {
        let plan = spec.draw(grid, derive_seed(base_seed, Stream::Sampling, i as u64))?;
        let mut counts = vec![0usize; (grid.rows / window) * wc];
        for k in plan.visible() {
            let (r, c) = grid.coords(k);
            counts[(r / window) * wc + c / window] += 1;
        }
        for c in counts {
            *histogram.entry(c).or_insert(0) += 1;
            sum += c as f64;
            sq += (c * c) as f64;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let variance = (sq / n as f64 - mean * mean).max(0.0);
    // Integer-valued observations: a single histogram bin means the
    // variance is exactly zero, without rounding residue.
    let variance = if histogram.len() == 1 { 0.0 } else { variance };
    Ok(MaskStats {
        strategy: spec.strategy.to_string(),
        rows: grid.rows,
        cols: grid.cols,
        window,
        seeds,
        mean,
        variance,
        min: *histogram.keys().next().expect("non-empty"),
        max: *histogram.keys().next_back().expect("non-empty"),
        histogram,
    })
}
