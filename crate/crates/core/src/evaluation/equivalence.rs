use rand::Rng;
use serde::Serialize;

use crate::encoders::{build_encoder, EncoderConfig, EncoderOutput, Space};
use crate::masking::{build_compact_map, sample_uniform, PatchGrid};
use crate::numerics::{DType, Element, Graph, Tape, Var};
use crate::patchio::{compose_compact_image, Image};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub arch: String,
    pub geometry: String,
    pub dtype: DType,
    pub trials: usize,
    pub tolerance: f64,
    /// Largest difference per stage over all trials (final entry: after the
    /// final norm).
    pub max_abs_diff: Vec<f64>,
    pub pass: bool,
}

impl EquivalenceReport {
    pub fn worst(&self) -> f64 {
        self.max_abs_diff.iter().copied().fold(0.0, f64::max)
    }
}

impl std::fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let stages: Vec<String> = self.max_abs_diff.iter().map(|d| format!("{d:.3e}")).collect();
        write!(
            f,
            "{} {} {} trials={} tol={:e} max_abs_diff=[{}] {}",
            self.arch,
            self.geometry,
            self.dtype,
            self.trials,
            self.tolerance,
            stages.join(", "),
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

fn max_diff<T: Element>(a: &Tape<T>, va: Var, b: &Tape<T>, vb: Var) -> Result<f64> {
    a.value(va).max_abs_diff(b.value(vb))
}

fn stage_diffs<T: Element>(ga: &Graph<T>, oa: &EncoderOutput, gb: &Graph<T>, ob: &EncoderOutput) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(oa.traces.len() + 1);
    for (ta, tb) in oa.traces.iter().zip(&ob.traces) {
        if (ta.rows, ta.cols) != (tb.rows, tb.cols) {
            return Err(Error::shape("certify", "trace extents differ between routes"));
        }
        out.push(max_diff(&ga.tape, ta.value, &gb.tape, tb.value)?);
    }
    out.push(max_diff(&ga.tape, oa.tokens, &gb.tape, ob.tokens)?);
    Ok(out)
}

fn run_trial<T: Element>(config: &EncoderConfig, grid: &PatchGrid, seed: u64) -> Result<Vec<f64>> {
    let (enc, store64) = build_encoder(config, seed)?;
    let store = store64.cast::<T>();
    let p = grid.patch_size;
    let mut rng = stream_rng(seed, Stream::Trial, 0);
    let img = Image::from_fn(grid.rows * p, grid.cols * p, |_, _, _| rng.random::<f64>());
    let plan = sample_uniform(*grid, seed)?;
    let map = build_compact_map(&plan)?;
    let compact = compose_compact_image(&img, &plan, &map)?;

    let mut gc = Graph::new(&store);
    let pc = gc.tape.constant(enc.embed_input(&compact)?.cast())?;
    let xc = enc.embed(&mut gc, pc)?;
    let oc = enc.forward_grid(&mut gc, xc, compact.height / enc.config.embed_stride(), compact.width / enc.config.embed_stride(), Space::Compact)?;

    let mut gf = Graph::new(&store);
    let pf = gf.tape.constant(enc.embed_input(&img)?.cast())?;
    let xf = enc.embed(&mut gf, pf)?;
    let of = enc.forward_full_masked(&mut gf, xf, grid, &map)?;

    stage_diffs(&gc, &oc, &gf, &of)
}

/// Runs the compact route and the full-masked route on `trials` random
/// (parameters, image, uniform plan) triples and compares every stage.
pub fn certify_equivalence(config: &EncoderConfig, grid: &PatchGrid, trials: usize, dtype: DType, tolerance: f64, seed: u64) -> Result<EquivalenceReport> {
    config.check(grid)?;
    let mut worst: Vec<f64> = Vec::new();
    for t in 0..trials {
        let s = derive_seed(seed, Stream::Trial, t as u64);
        let d = match dtype {
            DType::F64 => run_trial::<f64>(config, grid, s)?,
            DType::F32 => run_trial::<f32>(config, grid, s)?,
        };
        if worst.is_empty() {
            worst = d;
        } else {
            for (w, v) in worst.iter_mut().zip(d) {
                *w = w.max(v);
            }
        }
    }
    let tokens = grid.rows * config.tokens_per_patch()?;
    let geometry = match config {
        EncoderConfig::Pvt(c) => format!(
            "tokens={tokens}x{} sr={:?}",
            grid.cols * config.tokens_per_patch()?,
            c.stages.iter().map(|s| s.sr).collect::<Vec<_>>()
        ),
        EncoderConfig::Swin(c) => format!(
            "tokens={tokens}x{} window={} shift={} bias={:?}",
            grid.cols * config.tokens_per_patch()?,
            c.window,
            c.shift,
            c.bias
        ),
    };
    let pass = worst.iter().all(|&d| d <= tolerance);
    Ok(EquivalenceReport {
        arch: config.arch_name().into(),
        geometry,
        dtype,
        trials,
        tolerance,
        max_abs_diff: worst,
        pass,
    })
}

/// The shipped verification matrix: MiniPVT on 16×16 and 32×32 stage-0
/// token grids, MiniSwin on 16×16 (single window) and 32×32 (shifted).
pub fn default_matrix(arch: &str) -> Result<Vec<(EncoderConfig, PatchGrid)>> {
    use crate::encoders::{PvtConfig, SwinConfig};
    let g = |n| PatchGrid::new(n, n, 16);
    match arch {
        "pvt" => Ok(vec![
            (EncoderConfig::Pvt(PvtConfig::default()), g(4)?),
            (EncoderConfig::Pvt(PvtConfig::default()), g(8)?),
        ]),
        "swin" => Ok(vec![
            (EncoderConfig::Swin(SwinConfig::default()), g(4)?),
            (EncoderConfig::Swin(SwinConfig::default()), g(8)?),
        ]),
        other => Err(Error::InvalidArgument(format!("unknown arch {other:?} (expected pvt or swin)"))),
    }
}
