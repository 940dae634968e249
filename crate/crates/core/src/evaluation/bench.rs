use std::time::Instant;

use serde::Serialize;

use crate::masking::{MaskSpec, Strategy};
use crate::numerics::{Grads, Graph, TapeStats};
use crate::pipelines::{build_model, AdamW, AdamWConfig, Corpus, Model, ModelConfig, PipelineKind};
use crate::rng::{derive_seed, Stream};
use crate::{Error, Result};

pub const WARMUP_STEPS: usize = 5;

/// Closed-form and measured cost of one pipeline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub pipeline: PipelineKind,
    pub arch: String,
    pub image_size: usize,
    pub batch: usize,
    pub steps: usize,
    /// Stage-0 tokens entering the encoder per sample.
    pub encoder_tokens: usize,
    /// Patches whose content reaches the encoder per sample.
    pub encoder_patches: usize,
    /// Closed-form encoder multiply-accumulates per sample.
    pub encoder_macs: u64,
    /// Encoder multiply-accumulates counted by the tape per sample.
    pub encoder_macs_measured: u64,
    /// Closed-form multiply-accumulates after the encoder per sample.
    pub head_macs: u64,
    pub median_step_ms: f64,
    /// Engine high-water allocation over all timed steps.
    pub peak_bytes: usize,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str =
        "pipeline,arch,image_size,batch,steps,encoder_tokens,encoder_patches,encoder_flops,encoder_flops_measured,head_flops,median_step_ms,peak_bytes";

    /// FLOPs are reported as two per multiply-accumulate.
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:.3},{}",
            self.pipeline,
            self.arch,
            self.image_size,
            self.batch,
            self.steps,
            self.encoder_tokens,
            self.encoder_patches,
            2 * self.encoder_macs,
            2 * self.encoder_macs_measured,
            2 * self.head_macs,
            self.median_step_ms,
            self.peak_bytes
        )
    }
}

/// Closed-form part of a [`BenchReport`] (no timing, no allocation).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopEstimate {
    pub pipeline: PipelineKind,
    pub encoder_patches: usize,
    pub encoder_macs: u64,
    pub head_macs: u64,
}

pub fn flop_estimate(config: &ModelConfig) -> Result<FlopEstimate> {
    let (model, _) = build_model(config, 0)?;
    Ok(estimate(&model))
}

fn estimate(model: &Model) -> FlopEstimate {
    let grid = model.grid();
    FlopEstimate {
        pipeline: model.config.pipeline,
        encoder_patches: match model.config.pipeline {
            PipelineKind::Ummae => grid.len() / 4,
            PipelineKind::Simmim => grid.len(),
        },
        encoder_macs: model.encoder_macs(),
        head_macs: model.head_macs(),
    }
}

/// Default plan family of each pipeline: uniform sampling for the compact
/// route, random sampling at the same ratio for the mask-token baseline.
pub fn default_bench_mask(pipeline: PipelineKind) -> MaskSpec {
    let strategy = match pipeline {
        PipelineKind::Ummae => Strategy::Us,
        PipelineKind::Simmim => Strategy::Rs,
    };
    MaskSpec {
        strategy,
        mask_ratio: 0.75,
        sm_ratio: 0.0,
    }
}

/// Times `steps` training updates (forward, backward, AdamW) after
/// [`WARMUP_STEPS`] untimed ones. Each update records the whole batch on
/// one f32 tape.
pub fn bench(config: &ModelConfig, mask: &MaskSpec, batch: usize, steps: usize, seed: u64) -> Result<BenchReport> {
    if batch == 0 || steps == 0 {
        return Err(Error::InvalidArgument("batch and steps must be positive".into()));
    }
    let (model, mut store) = build_model(config, derive_seed(seed, Stream::Init, 0))?;
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    let corpus = Corpus::synthetic(batch, config.image_size, seed)?;
    let grid = model.grid();
    let mut times = Vec::with_capacity(steps);
    let mut peak = 0usize;
    let (mut tokens, mut patches, mut measured) = (0, 0, 0);
    for step in 0..WARMUP_STEPS + steps {
        let t0 = Instant::now();
        let store_t = store.cast::<f32>();
        let mut g = Graph::new(&store_t);
        let mut total = None;
        for (i, img) in corpus.images.iter().enumerate() {
            let plan = mask.draw(grid, derive_seed(seed, Stream::PlanSeed, (step * batch + i) as u64))?;
            let out = model.forward_loss(&mut g, img, &plan)?;
            if i == 0 {
                tokens = out.encoder_tokens;
                patches = out.encoder_patches;
                measured = out.encoder_macs;
            }
            total = Some(match total {
                None => out.loss,
                Some(t) => g.tape.add(t, out.loss)?,
            });
        }
        let loss = g.tape.scale(total.expect("batch is non-empty"), 1.0 / batch as f32)?;
        let grads: Grads<f64> = g.backward(loss)?.cast();
        opt.step(&mut store, &grads, 1e-4)?;
        let stats: TapeStats = g.tape.stats();
        let elapsed = t0.elapsed().as_secs_f64() * 1e3;
        if step >= WARMUP_STEPS {
            times.push(elapsed);
            peak = peak.max(stats.peak_bytes);
        }
    }
    times.sort_by(f64::total_cmp);
    let median = if times.len() % 2 == 1 {
        times[times.len() / 2]
    } else {
        0.5 * (times[times.len() / 2 - 1] + times[times.len() / 2])
    };
    let est = estimate(&model);
    Ok(BenchReport {
        pipeline: config.pipeline,
        arch: config.encoder.arch_name().into(),
        image_size: config.image_size,
        batch,
        steps,
        encoder_tokens: tokens,
        encoder_patches: patches,
        encoder_macs: est.encoder_macs,
        encoder_macs_measured: measured,
        head_macs: est.head_macs,
        median_step_ms: median,
        peak_bytes: peak,
    })
}

/// UM-MAE over mask-token baseline ratios of two reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchComparison {
    pub ummae: BenchReport,
    pub simmim: BenchReport,
    pub patch_ratio: f64,
    pub flop_ratio: f64,
    pub flop_ratio_measured: f64,
    pub time_ratio: f64,
    pub memory_ratio: f64,
}

impl BenchComparison {
    pub fn new(ummae: BenchReport, simmim: BenchReport) -> Self {
        let r = |a: f64, b: f64| a / b;
        BenchComparison {
            patch_ratio: r(ummae.encoder_patches as f64, simmim.encoder_patches as f64),
            flop_ratio: r(ummae.encoder_macs as f64, simmim.encoder_macs as f64),
            flop_ratio_measured: r(ummae.encoder_macs_measured as f64, simmim.encoder_macs_measured as f64),
            time_ratio: r(ummae.median_step_ms, simmim.median_step_ms),
            memory_ratio: r(ummae.peak_bytes as f64, simmim.peak_bytes as f64),
            ummae,
            simmim,
        }
    }

    pub const CSV_HEADER: &'static str = "patch_ratio,flop_ratio,flop_ratio_measured,time_ratio,memory_ratio";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.patch_ratio, self.flop_ratio, self.flop_ratio_measured, self.time_ratio, self.memory_ratio
        )
    }
}
