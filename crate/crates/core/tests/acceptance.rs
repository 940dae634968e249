//! Acceptance checks, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines reach the console; pass criterion numbers as
//! arguments to run a subset (`cargo test --test acceptance -- 3 6`).

use std::time::{Duration, Instant};

use rand::Rng;

use umlab::decoder::DecoderConfig;
use umlab::encoders::{EncoderConfig, PvtConfig, PvtStage};
use umlab::evaluation::{bench, certify_equivalence, default_bench_mask, default_matrix, mask_stats, BenchComparison};
use umlab::masking::{validate_plan, MaskSpec, PatchGrid, Strategy};
use umlab::numerics::{finite_diff_check_params, DType, Graph};
use umlab::patchio::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, GrayImage, Image};
use umlab::pipelines::{build_model, decode_checkpoint, encode_checkpoint, Corpus, ModelConfig, PipelineKind, TrainConfig, Trainer};
use umlab::rng::{stream_rng, Stream};

const F64_TOL: f64 = 1e-10;
const F32_TOL: f64 = 1e-5;
const VERIFY_TRIALS: usize = 20;
const PLAN_COUNT: usize = 10_000;
const STATS_SEEDS: usize = 1_000;
const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-3;
const RANK_SEEDS: u64 = 5;
const RANK_EPOCHS: usize = 30;
const RANK_CORPUS: usize = 64;
const RANK_MIN_AGREE: usize = 4;
const RANK_EVAL_PLANS: usize = 32;
const FLOP_RATIO_MAX: f64 = 0.30;
const TIME_RATIO_MAX: f64 = 0.67;
const MEMORY_RATIO_MAX: f64 = 0.67;
const PIXEL_TOL: f64 = 1.0 / 255.0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn pvt(stages: &[(usize, usize, usize)]) -> PvtConfig {
    PvtConfig {
        patch_size: 4,
        embed_stride: 2,
        mlp_ratio: 2,
        stages: stages
            .iter()
            .map(|&(dim, heads, sr)| PvtStage { depth: 1, dim, heads, sr })
            .collect(),
    }
}

fn micro(pipeline: PipelineKind, size: usize, enc: PvtConfig, dec: DecoderConfig) -> ModelConfig {
    let mut cfg = ModelConfig::new(pipeline, size, EncoderConfig::Pvt(enc));
    cfg.decoder = dec;
    cfg
}

fn equivalence() -> Verdict {
    let mut lines = Vec::new();
    let mut pass = true;
    for arch in ["pvt", "swin"] {
        for (enc, grid) in default_matrix(arch).unwrap() {
            for (dt, tol) in [(DType::F64, F64_TOL), (DType::F32, F32_TOL)] {
                let r = certify_equivalence(&enc, &grid, VERIFY_TRIALS, dt, tol, 0).unwrap();
                pass &= r.pass;
                lines.push(format!("{arch} {}x{} {dt} {:.1e}", grid.rows, grid.cols, r.worst()));
            }
        }
    }
    verdict(pass, lines.join("; "))
}

fn sampling() -> Verdict {
    let mut violations = 0;
    let mut rng = stream_rng(1, Stream::Trial, 0);
    for i in 0..PLAN_COUNT {
        let grid = PatchGrid::new(2 * rng.random_range(1..=16), 2 * rng.random_range(1..=16), 16).unwrap();
        let spec = if i % 2 == 0 {
            MaskSpec::new(Strategy::Us, 0.75, 0.0)
        } else {
            MaskSpec::new(Strategy::Um, 0.75, rng.random_range(0.0..0.9))
        };
        violations += validate_plan(&spec.unwrap().draw(grid, i as u64).unwrap()).len();
    }
    let grid = PatchGrid::new(16, 16, 16).unwrap();
    let us = mask_stats(&MaskSpec::new(Strategy::Us, 0.75, 0.0).unwrap(), grid, 4, STATS_SEEDS, 0).unwrap();
    let rs = mask_stats(&MaskSpec::new(Strategy::Rs, 0.75, 0.0).unwrap(), grid, 4, STATS_SEEDS, 0).unwrap();
    verdict(
        violations == 0 && us.variance == 0.0 && rs.variance > 0.0,
        format!(
            "{PLAN_COUNT} plans, {violations} violations; window variance US {} RS {:.3}",
            us.variance, rs.variance
        ),
    )
}

fn gradients() -> Verdict {
    let cfg = micro(
        PipelineKind::Ummae,
        16,
        pvt(&[(8, 1, 4), (8, 1, 2), (16, 2, 1)]),
        DecoderConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
        },
    );
    let (model, store) = build_model(&cfg, 3).unwrap();
    let mut rng = stream_rng(2, Stream::Trial, 0);
    let img = Image::from_fn(16, 16, |_, _, _| rng.random::<f64>());
    let plan = MaskSpec::new(Strategy::Um, 0.75, 0.5).unwrap().draw(model.grid(), 5).unwrap();

    let mut g = Graph::new(&store);
    let out = model.forward_loss(&mut g, &img, &plan).unwrap();
    let dpred = g.tape.backward(out.loss).unwrap().get_or_zeros(out.pred);
    let kept_grad = plan
        .kept
        .iter()
        .flat_map(|&k| dpred.row(k).iter().map(|v| v.abs()))
        .fold(0.0, f64::max);

    let started = Instant::now();
    let rel = finite_diff_check_params(
        &store,
        |g| Ok(model.forward_loss(g, &img, &plan)?.loss),
        FD_EPS,
    )
    .unwrap();
    verdict(
        kept_grad == 0.0 && rel < FD_TOL,
        format!(
            "max |dL/dpred| at kept {kept_grad:e}; FD over {} params rel err {rel:.2e} ({:.1}s)",
            store.numel(),
            started.elapsed().as_secs_f64()
        ),
    )
}

fn ranking() -> Verdict {
    let enc = pvt(&[(16, 1, 4), (32, 2, 2), (64, 4, 1)]);
    let dec = DecoderConfig {
        depth: 2,
        dim: 32,
        heads: 2,
        mlp_ratio: 2,
    };
    let corpus = Corpus::synthetic(RANK_CORPUS, 32, 2024).unwrap();
    let arms = [
        ("GS", PipelineKind::Ummae, Strategy::Gs, 0.0),
        ("US", PipelineKind::Ummae, Strategy::Us, 0.0),
        ("RS", PipelineKind::Simmim, Strategy::Rs, 0.0),
        ("UM", PipelineKind::Ummae, Strategy::Um, 0.25),
    ];
    let mut losses = vec![vec![0.0; arms.len()]; RANK_SEEDS as usize];
    for seed in 0..RANK_SEEDS {
        for (a, &(_, kind, strategy, sm)) in arms.iter().enumerate() {
            let mut train = TrainConfig::new(RANK_EPOCHS, 8, seed, strategy);
            train.base_lr = 0.05;
            train.mask = MaskSpec::new(strategy, 0.75, sm).unwrap();
            let mut t = Trainer::new(&micro(kind, 32, enc.clone(), dec), &train, corpus.len()).unwrap();
            t.run(&corpus, None, |_| {}).unwrap();
            losses[seed as usize][a] = t.evaluate(&corpus, RANK_EVAL_PLANS, 99).unwrap();
        }
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for w in 0..arms.len() - 1 {
        let agree = losses.iter().filter(|l| l[w] < l[w + 1]).count();
        pass &= agree >= RANK_MIN_AGREE;
        parts.push(format!("{}<{} {agree}/{RANK_SEEDS}", arms[w].0, arms[w + 1].0));
    }
    let means: Vec<String> = (0..arms.len())
        .map(|a| format!("{} {:.4}", arms[a].0, losses.iter().map(|l| l[a]).sum::<f64>() / RANK_SEEDS as f64))
        .collect();
    verdict(pass, format!("{}; mean loss {}", parts.join(", "), means.join(", ")))
}

fn efficiency() -> Verdict {
    let base = ModelConfig::default_pvt(PipelineKind::Ummae);
    let run = |p| {
        let cfg = ModelConfig {
            pipeline: p,
            ..base.clone()
        };
        bench(&cfg, &default_bench_mask(p), 2, 10, 0).unwrap()
    };
    let c = BenchComparison::new(run(PipelineKind::Ummae), run(PipelineKind::Simmim));
    let tokens_ok = 4 * c.ummae.encoder_tokens == c.simmim.encoder_tokens;
    let pass = tokens_ok
        && c.flop_ratio < FLOP_RATIO_MAX
        && c.flop_ratio_measured < FLOP_RATIO_MAX
        && c.time_ratio <= TIME_RATIO_MAX
        && c.memory_ratio <= MEMORY_RATIO_MAX;
    verdict(
        pass,
        format!(
            "tokens {} vs {}; flops {:.3} (measured {:.3}); time {:.3}; memory {:.3}",
            c.ummae.encoder_tokens, c.simmim.encoder_tokens, c.flop_ratio, c.flop_ratio_measured, c.time_ratio, c.memory_ratio
        ),
    )
}

fn reproducibility() -> Verdict {
    let cfg = micro(
        PipelineKind::Ummae,
        32,
        pvt(&[(8, 1, 4), (16, 2, 2), (32, 2, 1)]),
        DecoderConfig {
            depth: 1,
            dim: 16,
            heads: 2,
            mlp_ratio: 2,
        },
    );
    let corpus = Corpus::synthetic(8, 32, 7).unwrap();
    let mut train = TrainConfig::new(2, 2, 11, Strategy::Um);
    train.base_lr = 0.05;
    train.mask = MaskSpec::new(Strategy::Um, 0.75, 0.25).unwrap();
    let full = || {
        let mut t = Trainer::new(&cfg, &train, 8).unwrap();
        let rows = t.run(&corpus, None, |_| {}).unwrap();
        (rows, encode_checkpoint(&t).unwrap())
    };
    let (rows_a, bytes_a) = full();
    let (rows_b, bytes_b) = full();
    let rerun = rows_a == rows_b && bytes_a == bytes_b;
    let bit_identity = encode_checkpoint(&decode_checkpoint(&bytes_a).unwrap()).unwrap() == bytes_a;

    let mut half = Trainer::new(&cfg, &train, 8).unwrap();
    let mut rows = half.run(&corpus, Some(5), |_| {}).unwrap();
    let mut resumed = decode_checkpoint(&encode_checkpoint(&half).unwrap()).unwrap();
    rows.extend(resumed.run(&corpus, None, |_| {}).unwrap());
    let resume = rows == rows_a && encode_checkpoint(&resumed).unwrap() == bytes_a;

    let img = &corpus.images[0];
    let back = decode_ppm(&encode_ppm(img)).unwrap();
    let worst = img.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let gray = GrayImage {
        height: 2,
        width: 3,
        data: vec![0, 1, 127, 128, 254, 255],
    };
    let pgm = decode_pgm(&encode_pgm(&gray)).unwrap() == gray;
    verdict(
        rerun && bit_identity && resume && worst <= PIXEL_TOL && pgm,
        format!(
            "checkpoint bit identity {bit_identity}; resume {resume}; re-run identical {rerun}; PPM max err {worst:.5}; PGM exact {pgm}"
        ),
    )
}

fn main() {
    let criteria: [(u32, &str, fn() -> Verdict, Duration); 6] = [
        (1, "compact/full-masked equivalence", equivalence, Duration::from_secs(120)),
        (2, "sampling invariants and window variance", sampling, Duration::from_secs(60)),
        (3, "kept-position gradient and finite differences", gradients, Duration::from_secs(120)),
        (4, "pretraining loss ranking GS<US<RS<UM", ranking, Duration::from_secs(1800)),
        (5, "MiniPVT encoder efficiency", efficiency, Duration::from_secs(300)),
        (6, "checkpoints, resume, image round trips", reproducibility, Duration::from_secs(120)),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    for (n, name, run, budget) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let v = run();
        let took = started.elapsed();
        let pass = v.pass && took <= budget;
        println!(
            "criterion {n} {}: {name}: {} [{:.1}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
}
