use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde_json::json;

use umlab::encoders::{EncoderConfig, PvtConfig, SwinConfig};
use umlab::evaluation::{
    bench as run_bench, certify_equivalence, default_bench_mask, default_matrix, mask_stats, BenchComparison, BenchReport,
    EquivalenceReport, MaskStats,
};
use umlab::masking::{MaskSpec, PatchGrid, Strategy};
use umlab::nn::BiasMode;
use umlab::numerics::DType;
use umlab::patchio::{mask_image, read_ppm, write_pgm, write_ppm};
use umlab::pipelines::{
    epoch_means, load_checkpoint, save_checkpoint, write_curve, Corpus, ModelConfig, PipelineKind, TrainConfig, Trainer,
};

use crate::{Globals, Outcome};

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("grid must look like 16x16, got {s:?}"))?;
    let r = r.trim().parse().map_err(|_| format!("bad row count in {s:?}"))?;
    let c = c.trim().parse().map_err(|_| format!("bad column count in {s:?}"))?;
    Ok((r, c))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

#[derive(Args, Debug)]
pub struct MaskArgs {
    /// Patch grid as ROWSxCOLS.
    #[arg(long, value_parser = parse_grid, default_value = "16x16")]
    grid: (usize, usize),
    #[arg(long, default_value_t = 16)]
    patch_size: usize,
    #[arg(long)]
    strategy: Strategy,
    /// Fraction of patches dropped by random sampling.
    #[arg(long, default_value_t = 0.75)]
    mask_ratio: f64,
    /// Fraction of kept patches replaced by the mask token (um only).
    #[arg(long, default_value_t = 0.0)]
    sm_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Plan JSON output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// PGM visualization, one pixel per patch.
    #[arg(long)]
    viz: Option<PathBuf>,
}

pub fn mask(a: MaskArgs, g: Globals) -> Result<Outcome> {
    let spec = MaskSpec::new(a.strategy, a.mask_ratio, a.sm_ratio)?;
    let grid = PatchGrid::new(a.grid.0, a.grid.1, a.patch_size)?;
    let plan = spec.draw(grid, a.seed)?;
    if let Some(out) = &a.out {
        write_text(out, &(plan.to_json()? + "\n"))?;
    }
    if let Some(viz) = &a.viz {
        write_pgm(&mask_image(&plan), viz)?;
    }
    if g.json {
        print_json(&plan)?;
    } else {
        println!(
            "{} {}x{} seed {}: {} kept, {} secondary-masked, {} dropped",
            plan.strategy,
            grid.rows,
            grid.cols,
            a.seed,
            plan.kept.len(),
            plan.sm_masked.len(),
            grid.len() - plan.kept.len()
        );
    }
    Ok(Outcome::Ok)
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Encoder family of the shipped geometry matrix.
    #[arg(long, default_value = "pvt")]
    arch: String,
    /// JSON file with one `{"encoder": ..., "grid": ...}` case or a list.
    #[arg(long)]
    geometry: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// f32, f64 or both.
    #[arg(long, default_value = "both")]
    dtype: String,
    /// Overrides the per-dtype tolerance (1e-10 at f64, 1e-5 at f32).
    #[arg(long)]
    tol: Option<f64>,
    /// Relative-position bias of windowed encoders.
    #[arg(long, value_parser = parse_bias)]
    bias: Option<BiasMode>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_bias(s: &str) -> std::result::Result<BiasMode, String> {
    match s {
        "off" => Ok(BiasMode::Off),
        "compact" => Ok(BiasMode::Compact),
        "full-space" => Ok(BiasMode::FullSpace),
        other => Err(format!("unknown bias {other:?} (expected off, compact or full-space)")),
    }
}

#[derive(serde::Deserialize)]
struct GeometryCase {
    encoder: EncoderConfig,
    grid: PatchGrid,
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum GeometryFile {
    One(GeometryCase),
    Many(Vec<GeometryCase>),
}

pub fn verify(a: VerifyArgs, g: Globals) -> Result<Outcome> {
    let mut cases: Vec<(EncoderConfig, PatchGrid)> = match &a.geometry {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            match serde_json::from_str::<GeometryFile>(&text).with_context(|| format!("parsing {}", path.display()))? {
                GeometryFile::One(c) => vec![(c.encoder, c.grid)],
                GeometryFile::Many(v) => v.into_iter().map(|c| (c.encoder, c.grid)).collect(),
            }
        }
        None => default_matrix(&a.arch)?,
    };
    if let Some(bias) = a.bias {
        for (enc, _) in &mut cases {
            match enc {
                EncoderConfig::Swin(c) => c.bias = bias,
                EncoderConfig::Pvt(_) => bail!("--bias applies to the swin encoder only"),
            }
        }
    }
    let dtypes: Vec<DType> = match a.dtype.as_str() {
        "both" => vec![DType::F64, DType::F32],
        other => vec![other.parse().map_err(anyhow::Error::msg)?],
    };
    let mut violations = Vec::new();
    for (enc, grid) in &cases {
        for v in enc.validate(grid) {
            violations.push(format!("{} {}x{}: {v}", enc.arch_name(), grid.rows, grid.cols));
        }
    }
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        bail!("{} geometry violation(s)", violations.len());
    }
    let mut reports: Vec<EquivalenceReport> = Vec::new();
    for (enc, grid) in &cases {
        for &dt in &dtypes {
            let tol = a.tol.unwrap_or(match dt {
                DType::F64 => 1e-10,
                DType::F32 => 1e-5,
            });
            let r = certify_equivalence(enc, grid, a.trials, dt, tol, a.seed)?;
            if !g.json {
                println!("{r}");
            }
            reports.push(r);
        }
    }
    let pass = reports.iter().all(|r| r.pass);
    if g.json {
        print_json(&json!({ "pass": pass, "reports": reports }))?;
    } else {
        println!("verify: {}", if pass { "PASS" } else { "FAIL" });
    }
    Ok(if pass { Outcome::Ok } else { Outcome::Failed })
}

/// Model and training settings of one run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Run config JSON (`{"model": ..., "train": ...}`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Flat directory of `*.ppm` images.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Use a generated corpus of this many images instead of `--corpus`.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Checkpoint output.
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV (`step,epoch,lr,loss`).
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Continue from a checkpoint; its config wins over `--config`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many updates in this invocation.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    sm_ratio: Option<f64>,
    /// Add secondary-masked patches to the loss support.
    #[arg(long)]
    loss_includes_sm: bool,
    /// Absolute-error loss for the mask-token baseline.
    #[arg(long)]
    simmim_l1: bool,
}

fn load_run_config(a: &PretrainArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig {
            model: ModelConfig::default_pvt(PipelineKind::Ummae),
            train: TrainConfig::new(5, 8, 0, Strategy::Us),
        },
    };
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.base_lr {
        t.base_lr = v;
    }
    if let Some(v) = a.strategy {
        t.mask.strategy = v;
    }
    if let Some(v) = a.sm_ratio {
        t.mask.sm_ratio = v;
    }
    cfg.model.loss_includes_sm |= a.loss_includes_sm;
    cfg.model.simmim_l1 |= a.simmim_l1;
    t.validate()?;
    cfg.model.validate()?;
    Ok(cfg)
}

fn load_corpus(a: &PretrainArgs, image_size: usize, seed: u64) -> Result<Corpus> {
    match (&a.corpus, a.synthetic) {
        (Some(_), Some(_)) => bail!("--corpus and --synthetic are mutually exclusive"),
        (Some(dir), None) => {
            if !dir.is_dir() {
                bail!("corpus directory {} does not exist", dir.display());
            }
            Ok(Corpus::from_dir(dir)?)
        }
        (None, Some(n)) => Ok(Corpus::synthetic(n, image_size, seed)?),
        (None, None) => bail!("one of --corpus or --synthetic is required"),
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn pretrain(a: PretrainArgs, g: Globals) -> Result<Outcome> {
    let (mut trainer, corpus) = match &a.resume {
        Some(ckpt) => {
            let t = load_checkpoint(ckpt)?;
            let corpus = load_corpus(&a, t.model.config.image_size, t.train.seed)?;
            (t, corpus)
        }
        None => {
            let cfg = load_run_config(&a)?;
            let corpus = load_corpus(&a, cfg.model.image_size, cfg.train.seed)?;
            (Trainer::new(&cfg.model, &cfg.train, corpus.len())?, corpus)
        }
    };
    let resolved = RunConfig {
        model: trainer.model.config.clone(),
        train: trainer.train.clone(),
    };
    write_text(&sidecar(&a.out, ".config.json"), &(serde_json::to_string_pretty(&resolved)? + "\n"))?;

    let start = trainer.step;
    let trace = g.trace;
    let rows = trainer.run(&corpus, a.steps, |r| {
        if trace {
            eprintln!("step {} epoch {} lr {:.3e} loss {:.6}", r.step, r.epoch, r.lr, r.loss);
        }
    })?;
    save_checkpoint(&trainer, &a.out)?;
    if let Some(curve) = &a.curve {
        write_curve(&rows, curve, a.resume.is_some())?;
    }
    let means = epoch_means(&rows);
    if g.json {
        print_json(&json!({
            "start_step": start,
            "end_step": trainer.step,
            "total_steps": trainer.total_steps(),
            "epoch_means": means,
            "final_loss": rows.last().map(|r| r.loss),
        }))?;
    } else {
        let first_epoch = rows.first().map_or(0, |r| r.epoch);
        for (i, m) in means.iter().enumerate() {
            println!("epoch {} mean loss {m:.6}", first_epoch + i as u64);
        }
        println!(
            "updates {}..{} of {}; checkpoint {}",
            start,
            trainer.step,
            trainer.total_steps(),
            a.out.display()
        );
    }
    Ok(Outcome::Ok)
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input PPM; must match the model's input size.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for original.ppm, masked.ppm and recon.ppm.
    #[arg(long)]
    out: PathBuf,
    /// Plan strategy; defaults to the checkpoint's training strategy.
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    sm_ratio: Option<f64>,
}

pub fn reconstruct(a: ReconstructArgs, g: Globals) -> Result<Outcome> {
    let trainer = load_checkpoint(&a.ckpt)?;
    let img = read_ppm(&a.image)?;
    let size = trainer.model.config.image_size;
    if img.height != size || img.width != size {
        bail!("image is {}x{}, the checkpoint expects {size}x{size}", img.height, img.width);
    }
    let mut spec = trainer.train.mask;
    if let Some(s) = a.strategy {
        spec.strategy = s;
        if s != Strategy::Um {
            spec.sm_ratio = 0.0;
        }
    }
    if let Some(r) = a.sm_ratio {
        spec.sm_ratio = r;
    }
    let plan = spec.draw(trainer.model.grid(), a.seed)?;
    let rec = trainer.model.reconstruct(&trainer.store, &img, &plan)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_ppm(&img, a.out.join("original.ppm"))?;
    write_ppm(&rec.masked, a.out.join("masked.ppm"))?;
    write_ppm(&rec.recon, a.out.join("recon.ppm"))?;
    if g.json {
        print_json(&json!({ "plan": plan, "loss": rec.report.total, "targets": rec.report.count }))?;
    } else {
        println!(
            "{} plan seed {}: loss {:.6} over {} patches; wrote {}",
            plan.strategy,
            a.seed,
            rec.report.total,
            rec.report.count,
            a.out.display()
        );
    }
    Ok(Outcome::Ok)
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value = "pvt")]
    arch: String,
    /// ummae, simmim or both.
    #[arg(long, default_value = "both")]
    pipeline: String,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Timed steps (after 5 warmup steps).
    #[arg(long, default_value_t = 30)]
    steps: usize,
    #[arg(long, default_value_t = 128)]
    image_size: usize,
    /// Model config JSON replacing the default encoder for `--arch`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append report rows to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

pub fn bench(a: BenchArgs, g: Globals) -> Result<Outcome> {
    let base: ModelConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => {
            let enc = match a.arch.as_str() {
                "pvt" => EncoderConfig::Pvt(PvtConfig::default()),
                "swin" => EncoderConfig::Swin(SwinConfig::default()),
                other => bail!("unknown arch {other:?} (expected pvt or swin)"),
            };
            ModelConfig::new(PipelineKind::Ummae, a.image_size, enc)
        }
    };
    let pipelines: Vec<PipelineKind> = match a.pipeline.as_str() {
        "both" => vec![PipelineKind::Ummae, PipelineKind::Simmim],
        other => vec![other.parse().map_err(anyhow::Error::msg)?],
    };
    let mut reports: Vec<BenchReport> = Vec::new();
    for p in pipelines {
        let cfg = ModelConfig {
            pipeline: p,
            ..base.clone()
        };
        cfg.validate()?;
        reports.push(run_bench(&cfg, &default_bench_mask(p), a.batch, a.steps, a.seed)?);
    }
    let comparison = (reports.len() == 2).then(|| BenchComparison::new(reports[0].clone(), reports[1].clone()));
    let mut lines = vec![BenchReport::CSV_HEADER.to_string()];
    lines.extend(reports.iter().map(BenchReport::csv));
    if let Some(csv) = &a.csv {
        let fresh = !csv.exists();
        let mut text = String::new();
        for (i, l) in lines.iter().enumerate() {
            if i > 0 || fresh {
                text.push_str(l);
                text.push('\n');
            }
        }
        use std::io::Write;
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(csv)
            .and_then(|mut f| f.write_all(text.as_bytes()))
            .with_context(|| format!("writing {}", csv.display()))?;
    }
    if g.json {
        print_json(&json!({ "reports": reports, "comparison": comparison }))?;
    } else {
        for l in &lines {
            println!("{l}");
        }
        if let Some(c) = &comparison {
            println!("{}", BenchComparison::CSV_HEADER);
            println!("{}", c.csv());
        }
    }
    Ok(Outcome::Ok)
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    strategy: Strategy,
    #[arg(long, value_parser = parse_grid, default_value = "16x16")]
    grid: (usize, usize),
    /// Window edge in patches.
    #[arg(long, default_value_t = 4)]
    window: usize,
    #[arg(long, default_value_t = 1000)]
    seeds: usize,
    #[arg(long, default_value_t = 0.75)]
    mask_ratio: f64,
    #[arg(long, default_value_t = 0.0)]
    sm_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn stats(a: StatsArgs, g: Globals) -> Result<Outcome> {
    let spec = MaskSpec::new(a.strategy, a.mask_ratio, a.sm_ratio)?;
    let grid = PatchGrid::new(a.grid.0, a.grid.1, 16)?;
    let s: MaskStats = mask_stats(&spec, grid, a.window, a.seeds, a.seed)?;
    if g.json {
        print_json(&s)?;
    } else {
        println!("{}", MaskStats::CSV_HEADER);
        println!("{}", s.csv());
    }
    Ok(Outcome::Ok)
}
