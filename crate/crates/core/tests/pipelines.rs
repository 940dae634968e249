use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umlab::decoder::DecoderConfig;
use umlab::encoders::{EncoderConfig, PvtConfig, PvtStage};
use umlab::masking::{apply_secondary_mask, sample_uniform, MaskPlan, MaskSpec, Strategy};
use umlab::numerics::{DType, Grads, Graph, ParamStore, Tensor};
use umlab::patchio::Image;
use umlab::pipelines::{
    build_model, cosine_lr, decays, decode_checkpoint, encode_checkpoint, epoch_means, read_checkpoint_header, scaled_lr,
    AdamW, AdamWConfig, Corpus, ModelConfig, PipelineKind, TrainConfig, Trainer,
};
use umlab::Error;

fn micro_model(pipeline: PipelineKind) -> ModelConfig {
    let stage = |dim, heads, sr| PvtStage {
        depth: 1,
        dim,
        heads,
        sr,
    };
    let enc = PvtConfig {
        patch_size: 4,
        embed_stride: 2,
        mlp_ratio: 2,
        stages: vec![stage(8, 1, 4), stage(16, 2, 2), stage(32, 2, 1)],
    };
    let mut cfg = ModelConfig::new(pipeline, 32, EncoderConfig::Pvt(enc));
    cfg.decoder = DecoderConfig {
        depth: 1,
        dim: 16,
        heads: 2,
        mlp_ratio: 2,
    };
    cfg
}

fn micro_train(epochs: usize, seed: u64, strategy: Strategy) -> TrainConfig {
    let mut t = TrainConfig::new(epochs, 4, seed, strategy);
    t.base_lr = 0.05;
    t
}

fn random_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(size, size, |_, _, _| rng.random::<f64>())
}

/// A rank-2 `.weight`, a `.bias` and a rank-1 norm gain.
fn toy_store() -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("lin.weight", Tensor::from_f64(&[2, 2], &[0.5, -1.0, 2.0, 0.0]).unwrap()).unwrap();
    s.add("lin.bias", Tensor::from_f64(&[2], &[0.1, -0.1]).unwrap()).unwrap();
    s.add("norm.weight", Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap()).unwrap();
    s
}

/// Gradients of `Σ c ⊙ p` over every parameter, which are exactly `c`.
fn grads_of(store: &ParamStore<f64>, c: &[Tensor<f64>]) -> Grads<f64> {
    let mut g = Graph::new(store);
    let mut terms = Vec::new();
    for (id, ci) in store.ids().zip(c) {
        let p = g.param(id).unwrap();
        let k = g.tape.constant(ci.clone()).unwrap();
        let prod = g.tape.mul(p, k).unwrap();
        terms.push(g.tape.sum(prod).unwrap());
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.tape.add(total, t).unwrap();
    }
    g.backward(total).unwrap()
}

#[test]
fn decay_applies_to_weight_matrices_only() {
    assert!(decays("encoder.stage0.block0.attn.q.weight", &[8, 8]));
    assert!(!decays("decoder.norm.weight", &[16]));
    assert!(!decays("decoder.pred.bias", &[48]));
    assert!(!decays("decoder.mask_token", &[1, 16]));
}

#[test]
fn adamw_zero_gradient_without_decay_is_a_no_op() {
    let mut store = toy_store();
    let before = store.clone();
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &store);
    let zeros: Vec<_> = store.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
    let g = grads_of(&store, &zeros);
    opt.step(&mut store, &g, 0.1).unwrap();
    for (a, b) in store.iter().zip(before.iter()) {
        assert_eq!(a.tensor, b.tensor);
    }
}

#[test]
fn adamw_first_step_closed_form() {
    let mut store = toy_store();
    let before = store.clone();
    let c: Vec<_> = store.iter().map(|p| Tensor::from_fn(p.tensor.shape(), |i| 0.3 * (i as f64 + 1.0) - 0.5)).collect();
    let g = grads_of(&store, &c);
    let cfg = AdamWConfig::default();
    let lr = 0.01;
    let mut opt = AdamW::new(cfg, &store);
    opt.step(&mut store, &g, lr).unwrap();
    for ((p, p0), ci) in store.iter().zip(before.iter()).zip(&c) {
        let decay = if p.name == "lin.weight" { 1.0 - lr * 0.05 } else { 1.0 };
        for ((w, w0), gi) in p.tensor.data().iter().zip(p0.tensor.data()).zip(ci.data()) {
            // The bias-corrected moments equal g and g², so the step is lr·g/(|g|+eps).
            let want = w0 * decay - lr * gi / (gi.abs() + cfg.eps);
            assert!((w - want).abs() < 1e-15, "{}: {w} vs {want}", p.name);
        }
    }
}

#[test]
fn adamw_matches_a_reference_over_several_steps() {
    let mut store = toy_store();
    let cfg = AdamWConfig::default();
    let mut opt = AdamW::new(cfg, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut w: Vec<Vec<f64>> = store.iter().map(|p| p.tensor.data().to_vec()).collect();
    let mut m: Vec<Vec<f64>> = w.iter().map(|x| vec![0.0; x.len()]).collect();
    let mut v = m.clone();
    for t in 1..=5 {
        let c: Vec<_> = store.iter().map(|p| Tensor::from_fn(p.tensor.shape(), |_| rng.random_range(-1.0..1.0))).collect();
        let lr = 0.02 / t as f64;
        let g = grads_of(&store, &c);
        opt.step(&mut store, &g, lr).unwrap();
        for (k, ci) in c.iter().enumerate() {
            let wd = if k == 0 { cfg.weight_decay } else { 0.0 };
            for j in 0..w[k].len() {
                let g = ci.data()[j];
                m[k][j] = cfg.beta1 * m[k][j] + (1.0 - cfg.beta1) * g;
                v[k][j] = cfg.beta2 * v[k][j] + (1.0 - cfg.beta2) * g * g;
                let mh = m[k][j] / (1.0 - cfg.beta1.powi(t));
                let vh = v[k][j] / (1.0 - cfg.beta2.powi(t));
                w[k][j] = w[k][j] * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
    for (p, want) in store.iter().zip(&w) {
        for (a, b) in p.tensor.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
    }
    assert_eq!(opt.t, 5);
}

#[test]
fn cosine_schedule_shape() {
    let (total, warmup, peak) = (100, 10, 0.3);
    assert_eq!(cosine_lr(10, total, warmup, peak), peak);
    assert_eq!(cosine_lr(5, total, warmup, peak), 0.15);
    assert!(cosine_lr(100, total, warmup, peak).abs() < 1e-15);
    assert!((cosine_lr(55, total, warmup, peak) - peak / 2.0).abs() < 1e-12);
    for s in 1..total {
        let (a, b) = (cosine_lr(s, total, warmup, peak), cosine_lr(s + 1, total, warmup, peak));
        assert!((a - b).abs() <= peak / warmup as f64 + 1e-12, "jump at {s}");
        if s < warmup {
            assert!(b > a);
        } else {
            assert!(b <= a);
        }
    }
    assert!((scaled_lr(1.5e-4, 4096) - 2.4e-3).abs() < 1e-15);
}

#[test]
fn trainer_schedule_follows_the_global_batch() {
    let mut t = micro_train(10, 0, Strategy::Us);
    t.accum_steps = 2;
    let tr = Trainer::new(&micro_model(PipelineKind::Ummae), &t, 20).unwrap();
    assert_eq!(tr.steps_per_epoch(), 3);
    assert_eq!(tr.total_steps(), 30);
    let peak = 0.05 * 8.0 / 256.0;
    assert!((tr.lr_at(tr.warmup_steps()) - peak).abs() < 1e-15);
    assert!(tr.lr_at(30).abs() < 1e-15);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let corpus = Corpus::synthetic(8, 32, 1).unwrap();
    let mut t = Trainer::new(&micro_model(PipelineKind::Ummae), &micro_train(2, 3, Strategy::Um), 8).unwrap();
    t.train.mask = MaskSpec::new(Strategy::Um, 0.75, 0.25).unwrap();
    t.run(&corpus, Some(2), |_| {}).unwrap();
    let bytes = encode_checkpoint(&t).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    assert_eq!(back.step, 2);
    for (a, b) in back.store.iter().zip(t.store.iter()) {
        assert_eq!(a.tensor, b.tensor);
    }
    assert_eq!(back.opt, t.opt);
    let h = read_checkpoint_header(&bytes).unwrap();
    assert_eq!((h.step, h.corpus_len, h.rng.master_seed, h.rng.counter), (2, 8, 3, 8));
}

#[test]
fn corrupt_checkpoints_are_rejected_with_a_reason() {
    let t = Trainer::new(&micro_model(PipelineKind::Simmim), &micro_train(1, 0, Strategy::Rs), 4).unwrap();
    let bytes = encode_checkpoint(&t).unwrap();
    let msg = |b: &[u8]| match decode_checkpoint(b) {
        Err(Error::Checkpoint(m)) => m,
        other => panic!("expected a checkpoint error, got {:?}", other.map(|t| t.step)),
    };
    assert!(msg(&bytes[..2]).contains("magic"));
    assert!(msg(&bytes[..10]).contains("header length"));
    assert!(msg(&bytes[..40]).contains("header"));
    assert!(msg(&bytes[..bytes.len() - 3]).contains("tensor section"));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(msg(&bad).contains("bad magic"));
    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(msg(&newer).contains("version mismatch"));
    let mut longer = bytes;
    longer.push(0);
    assert!(msg(&longer).contains("trailing"));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let corpus = Corpus::synthetic(6, 32, 2).unwrap();
    let cfg = micro_model(PipelineKind::Ummae);
    let train = micro_train(2, 5, Strategy::Us);
    let mut full = Trainer::new(&cfg, &train, 6).unwrap();
    let rows_full = full.run(&corpus, None, |_| {}).unwrap();

    let mut first = Trainer::new(&cfg, &train, 6).unwrap();
    let mut rows = first.run(&corpus, Some(3), |_| {}).unwrap();
    let mut resumed = decode_checkpoint(&encode_checkpoint(&first).unwrap()).unwrap();
    rows.extend(resumed.run(&corpus, None, |_| {}).unwrap());
    assert_eq!(rows, rows_full);
    assert_eq!(encode_checkpoint(&resumed).unwrap(), encode_checkpoint(&full).unwrap());
}

#[test]
fn identical_runs_are_identical() {
    let corpus = Corpus::synthetic(4, 32, 0).unwrap();
    let run = || {
        let mut t = Trainer::new(&micro_model(PipelineKind::Simmim), &micro_train(2, 1, Strategy::Rs), 4).unwrap();
        let rows = t.run(&corpus, None, |_| {}).unwrap();
        (rows, encode_checkpoint(&t).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn um_with_zero_secondary_ratio_is_us() {
    let (model, store) = build_model(&micro_model(PipelineKind::Ummae), 3).unwrap();
    let img = random_image(32, 1);
    let us = sample_uniform(model.grid(), 8).unwrap();
    let um = apply_secondary_mask(&us, 0.0, 8).unwrap();
    let loss = |p: &MaskPlan| {
        let mut g = Graph::new(&store);
        model.forward_loss(&mut g, &img, p).unwrap().report
    };
    assert_eq!(loss(&us), loss(&um));
}

#[test]
fn secondary_masking_changes_the_encoder_input_only() {
    let (model, store) = build_model(&micro_model(PipelineKind::Ummae), 3).unwrap();
    let img = random_image(32, 1);
    let us = sample_uniform(model.grid(), 8).unwrap();
    let um = apply_secondary_mask(&us, 0.5, 8).unwrap();
    let run = |p: &MaskPlan| {
        let mut g = Graph::new(&store);
        let out = model.forward_loss(&mut g, &img, p).unwrap();
        (out.report, out.encoder_tokens)
    };
    let ((a, ta), (b, tb)) = (run(&us), run(&um));
    assert_eq!(a.rows, b.rows);
    assert_eq!(ta, tb);
    assert_ne!(a.total, b.total);
}

#[test]
fn baseline_with_nothing_masked_has_no_loss_support() {
    let (model, store) = build_model(&micro_model(PipelineKind::Simmim), 0).unwrap();
    let grid = model.grid();
    let plan = MaskPlan {
        grid,
        strategy: Strategy::Rs,
        seed: 0,
        sm_ratio: 0.0,
        kept: (0..grid.len()).collect(),
        sm_masked: vec![],
    };
    let mut g = Graph::new(&store);
    assert!(matches!(model.forward_loss(&mut g, &random_image(32, 0), &plan), Err(Error::EmptyLossSupport)));
}

#[test]
fn compact_pipeline_rejects_random_plans_and_wrong_inputs() {
    let (model, store) = build_model(&micro_model(PipelineKind::Ummae), 0).unwrap();
    let rs = MaskSpec::new(Strategy::Rs, 0.75, 0.0).unwrap().draw(model.grid(), 0).unwrap();
    let mut g = Graph::new(&store);
    assert!(matches!(model.forward_loss(&mut g, &random_image(32, 0), &rs), Err(Error::InvalidArgument(_))));
    let us = sample_uniform(model.grid(), 0).unwrap();
    assert!(matches!(model.forward_loss(&mut g, &random_image(48, 0), &us), Err(Error::Shape { .. })));
}

#[test]
fn full_size_shape_chain() {
    let cfg = ModelConfig::new(PipelineKind::Ummae, 256, EncoderConfig::Pvt(PvtConfig::default()));
    let (model, store) = build_model(&cfg, 0).unwrap();
    assert_eq!((model.grid().rows, model.grid().cols), (16, 16));
    assert_eq!(model.shuffle_factor(), 2);
    let plan = sample_uniform(model.grid(), 1).unwrap();
    let mut g = Graph::new(&store);
    let out = model.forward_loss(&mut g, &random_image(256, 2), &plan).unwrap();
    assert_eq!(out.encoder_patches, 64);
    // 8×8 compact patches, 4×4 tokens per patch at stride 4.
    assert_eq!(out.encoder_tokens, 64 * 16);
    assert_eq!(g.value(out.pred).shape(), &[256, 768]);
    assert_eq!(out.report.count, 192);
}

#[test]
fn compact_encoder_sees_a_quarter_of_the_tokens() {
    let img = random_image(32, 5);
    let mut tokens = Vec::new();
    for (kind, plan) in [
        (PipelineKind::Ummae, MaskSpec::new(Strategy::Us, 0.75, 0.0).unwrap()),
        (PipelineKind::Simmim, MaskSpec::new(Strategy::Rs, 0.75, 0.0).unwrap()),
    ] {
        let (model, store) = build_model(&micro_model(kind), 0).unwrap();
        let mut g = Graph::new(&store);
        let out = model.forward_loss(&mut g, &img, &plan.draw(model.grid(), 0).unwrap()).unwrap();
        assert_eq!(out.encoder_macs, model.encoder_macs());
        tokens.push(out.encoder_tokens);
    }
    assert_eq!(tokens[1], 4 * tokens[0]);
}

#[test]
fn training_reduces_the_loss() {
    let corpus = Corpus::synthetic(8, 32, 3).unwrap();
    let mut t = micro_train(8, 0, Strategy::Us);
    t.dtype = DType::F64;
    let mut tr = Trainer::new(&micro_model(PipelineKind::Ummae), &t, 8).unwrap();
    let before = tr.evaluate(&corpus, 2, 7).unwrap();
    let rows = tr.run(&corpus, None, |_| {}).unwrap();
    let means = epoch_means(&rows);
    assert_eq!(means.len(), 8);
    assert!(tr.evaluate(&corpus, 2, 7).unwrap() < before);
    assert!(means[7] < means[0], "{means:?}");
}

#[test]
fn reconstruction_keeps_visible_patches() {
    let (model, store) = build_model(&micro_model(PipelineKind::Ummae), 0).unwrap();
    let img = random_image(32, 9);
    let plan = apply_secondary_mask(&sample_uniform(model.grid(), 2).unwrap(), 0.25, 2).unwrap();
    let r = model.reconstruct(&store, &img, &plan).unwrap();
    assert_eq!((r.recon.height, r.recon.width, r.masked.height), (32, 32, 32));
    assert!(r.recon.data.iter().all(|v| (0.0..=1.0).contains(v)));
    let visible = plan.visible();
    let (gr, p) = (model.grid(), 4);
    for k in 0..gr.len() {
        let (py, px) = (k / gr.cols * p, k % gr.cols * p);
        let originals = visible.contains(&k) || plan.sm_masked.contains(&k);
        let same = (0..3).all(|c| (0..p).all(|y| (0..p).all(|x| r.recon.at(c, py + y, px + x) == img.at(c, py + y, px + x))));
        assert_eq!(same, originals, "patch {k}");
        let fill = if plan.sm_masked.contains(&k) {
            Some(0.5)
        } else if visible.contains(&k) {
            None
        } else {
            Some(0.0)
        };
        if let Some(f) = fill {
            assert_eq!(r.masked.at(0, py, px), f);
        }
    }
}
