use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::{random_resized_crop, Corpus, CropConfig};
use super::model::{build_model, Model, ModelConfig};
use super::optim::{cosine_lr, scaled_lr, AdamW, AdamWConfig};
use crate::masking::{MaskSpec, Strategy};
use crate::numerics::{DType, Element, Grads, Graph, ParamStore};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::{Error, Result};

fn default_accum() -> usize {
    1
}

fn default_base_lr() -> f64 {
    1.5e-4
}

fn default_warmup() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

fn default_dtype() -> DType {
    DType::F32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Batches whose gradients are averaged into one update.
    #[serde(default = "default_accum")]
    pub accum_steps: usize,
    /// Scaled by `global_batch / 256`.
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    /// Fraction of all updates spent in linear warmup.
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub mask: MaskSpec,
    #[serde(default)]
    pub crop: CropConfig,
    /// Random resized crops; without them every image is only resized.
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Compute precision of forward and backward passes. Master weights and
    /// optimizer moments stay in f64.
    #[serde(default = "default_dtype")]
    pub dtype: DType,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, seed: u64, strategy: Strategy) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            accum_steps: 1,
            base_lr: default_base_lr(),
            warmup_frac: default_warmup(),
            optimizer: AdamWConfig::default(),
            seed,
            mask: MaskSpec {
                strategy,
                mask_ratio: 0.75,
                sm_ratio: 0.0,
            },
            crop: CropConfig::default(),
            augment: true,
            dtype: DType::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.accum_steps == 0 {
            return Err(Error::InvalidArgument("epochs, batch size and accumulation steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::InvalidArgument(format!("warmup fraction {} outside [0, 1]", self.warmup_frac)));
        }
        if !(self.base_lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("base lr {} must be non-negative", self.base_lr)));
        }
        self.mask.check()
    }

    pub fn global_batch(&self) -> usize {
        self.batch_size * self.accum_steps
    }

    pub fn peak_lr(&self) -> f64 {
        scaled_lr(self.base_lr, self.global_batch())
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
}

pub const CURVE_HEADER: &str = "step,epoch,lr,loss";

impl CurveRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.epoch, self.lr, self.loss)
    }
}

pub fn write_curve(rows: &[CurveRow], path: impl AsRef<Path>, append: bool) -> Result<()> {
    let path = path.as_ref();
    let fresh = !append || !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(CURVE_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Mean loss of every epoch that appears in `rows`, in epoch order.
pub fn epoch_means(rows: &[CurveRow]) -> Vec<f64> {
    let mut out: Vec<(u64, f64, usize)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some((e, s, n)) if *e == r.epoch => {
                *s += r.loss;
                *n += 1;
            }
            _ => out.push((r.epoch, r.loss, 1)),
        }
    }
    out.into_iter().map(|(_, s, n)| s / n as f64).collect()
}

/// Mean of the last `k` epoch means.
pub fn converged_loss(rows: &[CurveRow], k: usize) -> f64 {
    let m = epoch_means(rows);
    let tail = &m[m.len().saturating_sub(k)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

/// Model, master weights, optimizer state and the update counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore<f64>,
    pub opt: AdamW,
    pub train: TrainConfig,
    pub step: u64,
    corpus_len: usize,
}

impl Trainer {
    pub fn new(model_config: &ModelConfig, train: &TrainConfig, corpus_len: usize) -> Result<Self> {
        train.validate()?;
        let (model, store) = build_model(model_config, derive_seed(train.seed, Stream::Init, 0))?;
        let opt = AdamW::new(train.optimizer, &store);
        Trainer::from_parts(model, store, opt, train.clone(), 0, corpus_len)
    }

    pub(crate) fn from_parts(model: Model, store: ParamStore<f64>, opt: AdamW, train: TrainConfig, step: u64, corpus_len: usize) -> Result<Self> {
        if corpus_len == 0 {
            return Err(Error::InvalidArgument("corpus is empty".into()));
        }
        Ok(Trainer {
            model,
            store,
            opt,
            train,
            step,
            corpus_len,
        })
    }

    pub fn corpus_len(&self) -> usize {
        self.corpus_len
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.corpus_len.div_ceil(self.train.global_batch()) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.train.epochs as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.train.warmup_frac * self.total_steps() as f64).round() as u64
    }

    /// Learning rate of update number `step` (counted from 1).
    pub fn lr_at(&self, step: u64) -> f64 {
        cosine_lr(step, self.total_steps(), self.warmup_steps(), self.train.peak_lr())
    }

    pub fn done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Runs updates until the schedule ends or `limit` more updates have
    /// been applied, calling `on_row` after each.
    pub fn run(&mut self, corpus: &Corpus, limit: Option<u64>, mut on_row: impl FnMut(&CurveRow)) -> Result<Vec<CurveRow>> {
        if corpus.len() != self.corpus_len {
            return Err(Error::InvalidArgument(format!(
                "trainer was set up for {} images, corpus has {}",
                self.corpus_len,
                corpus.len()
            )));
        }
        let end = limit.map_or(self.total_steps(), |l| (self.step + l).min(self.total_steps()));
        let mut rows = Vec::new();
        let mut cached: Option<(u64, Vec<usize>)> = None;
        while self.step < end {
            let spe = self.steps_per_epoch();
            let epoch = self.step / spe;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, corpus.epoch_order(self.train.seed, epoch)));
            }
            let order = &cached.as_ref().expect("order").1;
            let row = self.update(corpus, order, epoch)?;
            on_row(&row);
            rows.push(row);
        }
        Ok(rows)
    }

    fn update(&mut self, corpus: &Corpus, order: &[usize], epoch: u64) -> Result<CurveRow> {
        let gb = self.train.global_batch();
        let pos = (self.step % self.steps_per_epoch()) as usize;
        let lo = pos * gb;
        let hi = (lo + gb).min(order.len());
        let counters: Vec<u64> = (lo..hi).map(|j| epoch * self.corpus_len as u64 + j as u64).collect();
        let samples: Vec<usize> = order[lo..hi].to_vec();
        let (grads, loss) = match self.train.dtype {
            DType::F64 => self.batch_grads::<f64>(corpus, &samples, &counters)?,
            DType::F32 => self.batch_grads::<f32>(corpus, &samples, &counters)?,
        };
        let next = self.step + 1;
        let lr = self.lr_at(next);
        self.opt.step(&mut self.store, &grads, lr)?;
        if let Some(p) = self.store.iter().find(|p| !p.tensor.is_finite()) {
            return Err(Error::Diverged {
                step: next,
                detail: format!("parameter {} became non-finite (lr {lr}, batch loss {loss})", p.name),
            });
        }
        self.step = next;
        Ok(CurveRow {
            step: next,
            epoch,
            lr,
            loss,
        })
    }

    fn batch_grads<T: Element>(&self, corpus: &Corpus, samples: &[usize], counters: &[u64]) -> Result<(Grads<f64>, f64)> {
        let store_t = self.store.cast::<T>();
        let mut total = Grads::zeros_like(&self.store);
        let mut loss_sum = 0.0;
        let size = self.model.config.image_size;
        let grid = self.model.grid();
        for (&idx, &counter) in samples.iter().zip(counters) {
            let src = &corpus.images[idx];
            let img = if self.train.augment {
                random_resized_crop(src, size, &self.train.crop, &mut stream_rng(self.train.seed, Stream::Crop, counter))?
            } else if src.height == size && src.width == size {
                src.clone()
            } else {
                src.resize_bilinear(size, size)
            };
            let plan_seed = derive_seed(self.train.seed, Stream::PlanSeed, counter);
            let plan = self.train.mask.draw(grid, plan_seed)?;
            let diverged = |e: Error| Error::Diverged {
                step: self.step + 1,
                detail: format!("image {idx}, plan seed {plan_seed}: {e}"),
            };
            let mut g = Graph::new(&store_t);
            let out = self
                .model
                .forward_loss(&mut g, &img, &plan)
                .map_err(|e| if matches!(e, Error::NonFinite { .. }) { diverged(e) } else { e })?;
            if !out.report.total.is_finite() {
                return Err(diverged(Error::NonFinite { op: "loss" }));
            }
            loss_sum += out.report.total;
            let grads = g.backward(out.loss).map_err(diverged)?;
            total.accumulate(&grads.cast::<f64>());
        }
        let n = samples.len() as f64;
        total.scale(1.0 / n);
        Ok((total, loss_sum / n))
    }

    /// Mean f64 loss of the current weights over every corpus image (resized,
    /// no crop) under `plans` fixed plans each, drawn from `seed`.
    pub fn evaluate(&self, corpus: &Corpus, plans: usize, seed: u64) -> Result<f64> {
        let size = self.model.config.image_size;
        let grid = self.model.grid();
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, src) in corpus.images.iter().enumerate() {
            let img = if src.height == size && src.width == size {
                src.clone()
            } else {
                src.resize_bilinear(size, size)
            };
            for k in 0..plans {
                let plan_seed = derive_seed(seed, Stream::Eval, (i * plans + k) as u64);
                let plan = self.train.mask.draw(grid, plan_seed)?;
                let mut g = Graph::new(&self.store);
                sum += self.model.forward_loss(&mut g, &img, &plan)?.report.total;
                n += 1;
            }
        }
        Ok(sum / n.max(1) as f64)
    }
}
