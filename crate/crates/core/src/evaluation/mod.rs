//! Measurement harnesses: route equivalence, mask statistics, cost counters.

mod bench;
mod equivalence;
mod stats;

pub use bench::{bench, default_bench_mask, flop_estimate, BenchComparison, BenchReport, FlopEstimate, WARMUP_STEPS};
pub use equivalence::{certify_equivalence, default_matrix, EquivalenceReport};
pub use stats::{mask_stats, MaskStats};
