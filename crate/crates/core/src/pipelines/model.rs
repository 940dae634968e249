use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::decoder::{masked_loss, Decoder, DecoderConfig, LossReport};
use crate::encoders::{shuffle_factor, Encoder, EncoderConfig, PvtConfig, Space};
use crate::masking::{build_compact_map, compact_sm_flags, MaskPlan, PatchGrid};
use crate::nn::{sincos_2d, Init, Linear};
use crate::numerics::{Element, Graph, ParamId, ParamStore, Var};
use crate::patchio::{compose_compact_image, normalize_targets, patchify, Image, TARGET_EPS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineKind {
    /// Compact-input encoder with the MAE decoder.
    Ummae,
    /// Full-grid encoder with mask tokens and a linear head.
    Simmim,
}

impl std::str::FromStr for PipelineKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ummae" => Ok(PipelineKind::Ummae),
            "simmim" => Ok(PipelineKind::Simmim),
            other => Err(format!("unknown pipeline {other:?} (expected ummae or simmim)")),
        }
    }
}

impl std::fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PipelineKind::Ummae => "ummae",
            PipelineKind::Simmim => "simmim",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub pipeline: PipelineKind,
    /// Square input edge in pixels.
    pub image_size: usize,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    /// Adds secondary-masked patches to the reconstruction targets.
    #[serde(default)]
    pub loss_includes_sm: bool,
    /// Absolute error instead of squared error for the mask-token baseline.
    #[serde(default)]
    pub simmim_l1: bool,
}

impl ModelConfig {
    pub fn new(pipeline: PipelineKind, image_size: usize, encoder: EncoderConfig) -> Self {
        ModelConfig {
            pipeline,
            image_size,
            encoder,
            decoder: DecoderConfig::default(),
            loss_includes_sm: false,
            simmim_l1: false,
        }
    }

    /// Default MiniPVT on 128×128 inputs.
    pub fn default_pvt(pipeline: PipelineKind) -> Self {
        Self::new(pipeline, 128, EncoderConfig::Pvt(PvtConfig::default()))
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        let p = self.encoder.patch_size();
        if p == 0 || self.image_size % p != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} is not a multiple of patch size {p}",
                self.image_size
            )));
        }
        PatchGrid::new(self.image_size / p, self.image_size / p, p)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        self.encoder.check(&grid)?;
        shuffle_factor(self.encoder.tokens_per_patch()?, self.encoder.stage_specs().len())?;
        if self.pipeline == PipelineKind::Ummae {
            self.decoder.validate()?;
        }
        let d0 = self.encoder.stage_specs()[0].dim;
        if matches!(self.encoder, EncoderConfig::Pvt(_)) && d0 % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "stage-0 dim {d0} must be divisible by 4 for the sine-cosine embedding"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Head {
    Decoder(Decoder),
    Linear(Linear),
}

/// One of the two pretraining models, as parameter ids plus structure.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    /// Encoder-level placeholder: secondary-masked patches in the compact
    /// pipeline, every masked patch in the mask-token baseline.
    pub mask_token: ParamId,
    head: Head,
    grid: PatchGrid,
    shuffle: usize,
}

/// Everything a single forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub loss: Var,
    pub report: LossReport,
    /// `[N, 3·P²]` predictions in normalized-target space.
    pub pred: Var,
    /// Stage-0 tokens entering the encoder.
    pub encoder_tokens: usize,
    /// Patches whose content the encoder processes.
    pub encoder_patches: usize,
    /// Multiply-accumulates the tape recorded between patch embedding and
    /// the encoder output.
    pub encoder_macs: u64,
}

impl Model {
    pub fn new(config: &ModelConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let encoder = Encoder::new(&config.encoder, init, "encoder")?;
        let d0 = config.encoder.stage_specs()[0].dim;
        let shuffle = shuffle_factor(encoder.tokens_per_patch(), encoder.stages())?;
        let c = config.encoder.final_dim();
        let p = grid.patch_size;
        let (mask_name, head) = match config.pipeline {
            PipelineKind::Ummae => {
                if c % (shuffle * shuffle) != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "final dim {c} not divisible by the squared shuffle factor {}",
                        shuffle * shuffle
                    )));
                }
                let dec = Decoder::new(init, &config.decoder, c / (shuffle * shuffle), p)?;
                ("encoder.sm_token", Head::Decoder(dec))
            }
            PipelineKind::Simmim => (
                "encoder.mask_token",
                Head::Linear(Linear::new(init, "head", c, shuffle * shuffle * 3 * p * p, true)?),
            ),
        };
        let mask_token = init.normal(mask_name, &[1, d0], 0.02)?;
        Ok(Model {
            config: config.clone(),
            encoder,
            mask_token,
            head,
            grid,
            shuffle,
        })
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn decoder(&self) -> Option<&Decoder> {
        match &self.head {
            Head::Decoder(d) => Some(d),
            Head::Linear(_) => None,
        }
    }

    pub fn shuffle_factor(&self) -> usize {
        self.shuffle
    }

    /// Replaces the rows flagged in `masked` by the shared mask token.
    fn inject_token<T: Element>(&self, g: &mut Graph<T>, x: Var, masked: &[bool]) -> Result<Var> {
        if !masked.iter().any(|&m| m) {
            return Ok(x);
        }
        let n = masked.len();
        let tok = g.param(self.mask_token)?;
        let pool = g.tape.concat_rows(&[x, tok])?;
        let idx: Vec<usize> = (0..n).map(|i| if masked[i] { n } else { i }).collect();
        g.tape.gather_rows(pool, Arc::new(idx))
    }

    fn add_pos<T: Element>(&self, g: &mut Graph<T>, x: Var, rows: usize, cols: usize) -> Result<Var> {
        if !matches!(self.config.encoder, EncoderConfig::Pvt(_)) {
            return Ok(x);
        }
        let d = g.tape.shape(x)[1];
        let pos = g.tape.constant(sincos_2d(rows, cols, d).cast())?;
        g.tape.add(x, pos)
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        if img.height != self.config.image_size || img.width != self.config.image_size {
            return Err(Error::shape(
                "model",
                format!(
                    "image {}x{} for a model of input size {}",
                    img.height, img.width, self.config.image_size
                ),
            ));
        }
        Ok(())
    }

    /// Forward pass and reconstruction loss of `img` under `plan`.
    pub fn forward_loss<T: Element>(&self, g: &mut Graph<T>, img: &Image, plan: &MaskPlan) -> Result<ForwardOutput> {
        self.check_image(img)?;
        if plan.grid != self.grid {
            return Err(Error::shape("model", format!("plan grid {:?} differs from model grid {:?}", plan.grid, self.grid)));
        }
        match &self.head {
            Head::Decoder(dec) => self.ummae_forward(g, dec, img, plan),
            Head::Linear(head) => self.simmim_forward(g, head, img, plan),
        }
    }

    fn targets(&self, img: &Image, rows: Vec<usize>) -> Result<crate::patchio::ReconTarget> {
        let tokens = patchify(img, &self.grid)?;
        normalize_targets(&tokens, &rows, TARGET_EPS)
    }

    fn ummae_forward<T: Element>(&self, g: &mut Graph<T>, dec: &Decoder, img: &Image, plan: &MaskPlan) -> Result<ForwardOutput> {
        if !plan.strategy.one_per_cell() {
            return Err(Error::InvalidArgument(format!(
                "the compact pipeline needs one kept patch per 2x2 cell; {} plans go through the mask-token baseline",
                plan.strategy
            )));
        }
        let map = build_compact_map(plan)?;
        let compact = compose_compact_image(img, plan, &map)?;
        let tpp = self.encoder.tokens_per_patch();
        let (tr, tc) = (map.compact_rows * tpp, map.compact_cols * tpp);

        let pixels = g.tape.constant(self.encoder.embed_input(&compact)?.cast())?;
        let m0 = g.tape.stats().macs;
        let x = self.encoder.embed(g, pixels)?;
        let sm = compact_sm_flags(plan, &map);
        let token_sm: Vec<bool> = (0..tr * tc)
            .map(|i| sm[(i / tc / tpp) * map.compact_cols + (i % tc) / tpp])
            .collect();
        let x = self.inject_token(g, x, &token_sm)?;
        let x = self.add_pos(g, x, tr, tc)?;
        let out = self.encoder.forward_grid(g, x, tr, tc, Space::Compact)?;
        let encoder_macs = g.tape.stats().macs - m0;

        // [h·w, C] → [C, h, w] → shuffle → [n', C/r²].
        let r = self.shuffle;
        let c = g.tape.shape(out.tokens)[1];
        if out.rows * r != map.compact_rows || out.cols * r != map.compact_cols {
            return Err(Error::shape(
                "ummae",
                format!("encoder grid {}x{} cannot shuffle back to {}x{}", out.rows, out.cols, map.compact_rows, map.compact_cols),
            ));
        }
        let t = g.tape.transpose(out.tokens)?;
        let t = g.tape.reshape(t, &[c, out.rows, out.cols])?;
        let t = g.tape.pixel_shuffle(t, r)?;
        let t = g.tape.reshape(t, &[c / (r * r), map.len()])?;
        let encoded = g.tape.transpose(t)?;

        let full = dec.assemble_full_tokens(g, encoded, &map, self.grid.rows, self.grid.cols)?;
        let decoded = dec.decode(g, full)?;
        let pred = dec.predict_pixels(g, decoded)?;

        let mut rows = plan.dropped();
        if self.config.loss_includes_sm {
            rows.extend(&plan.sm_masked);
            rows.sort_unstable();
        }
        let target = self.targets(img, rows)?;
        let (loss, report) = masked_loss(g, pred, &target, false)?;
        Ok(ForwardOutput {
            loss,
            report,
            pred,
            encoder_tokens: out.input_tokens,
            encoder_patches: map.len(),
            encoder_macs,
        })
    }

    fn simmim_forward<T: Element>(&self, g: &mut Graph<T>, head: &Linear, img: &Image, plan: &MaskPlan) -> Result<ForwardOutput> {
        let tpp = self.encoder.tokens_per_patch();
        let (tr, tc) = (self.grid.rows * tpp, self.grid.cols * tpp);
        let visible = {
            let mut f = vec![false; self.grid.len()];
            for i in plan.visible() {
                f[i] = true;
            }
            f
        };
        let pixels = g.tape.constant(self.encoder.embed_input(img)?.cast())?;
        let m0 = g.tape.stats().macs;
        let x = self.encoder.embed(g, pixels)?;
        let token_masked: Vec<bool> = (0..tr * tc)
            .map(|i| !visible[self.grid.index(i / tc / tpp, (i % tc) / tpp)])
            .collect();
        let x = self.inject_token(g, x, &token_masked)?;
        let x = self.add_pos(g, x, tr, tc)?;
        let out = self.encoder.forward_grid(g, x, tr, tc, Space::Full)?;
        let encoder_macs = g.tape.stats().macs - m0;

        let r = self.shuffle;
        let y = head.forward(g, out.tokens)?;
        let dp = 3 * self.grid.patch_size * self.grid.patch_size;
        let mut idx = Vec::with_capacity(self.grid.len() * dp);
        for py in 0..self.grid.rows {
            for px in 0..self.grid.cols {
                let tok = (py / r) * out.cols + px / r;
                let sub = (py % r) * r + px % r;
                let base = (tok * r * r + sub) * dp;
                idx.extend(base..base + dp);
            }
        }
        let pred = g.tape.gather(y, Arc::new(idx), &[self.grid.len(), dp])?;

        let rows: Vec<usize> = (0..self.grid.len()).filter(|&i| !visible[i]).collect();
        let target = self.targets(img, rows)?;
        let (loss, report) = masked_loss(g, pred, &target, self.config.simmim_l1)?;
        Ok(ForwardOutput {
            loss,
            report,
            pred,
            encoder_tokens: out.input_tokens,
            encoder_patches: self.grid.len(),
            encoder_macs,
        })
    }

    /// Analytic encoder multiply-accumulates for one sample.
    pub fn encoder_macs(&self) -> u64 {
        let tpp = self.encoder.tokens_per_patch();
        match self.config.pipeline {
            PipelineKind::Ummae => self.encoder.macs(self.grid.compact_rows() * tpp, self.grid.compact_cols() * tpp, Space::Compact),
            PipelineKind::Simmim => self.encoder.macs(self.grid.rows * tpp, self.grid.cols * tpp, Space::Full),
        }
    }

    /// Analytic multiply-accumulates of everything after the encoder.
    pub fn head_macs(&self) -> u64 {
        match &self.head {
            Head::Decoder(d) => d.macs(self.grid.len(), self.grid.len() / 4),
            Head::Linear(h) => {
                let r = self.shuffle;
                h.macs(self.grid.len() / (r * r))
            }
        }
    }
}

/// Images for side-by-side inspection of one masked reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// Dropped patches black, secondary-masked patches mid-gray.
    pub masked: Image,
    /// Predictions denormalized with each patch's own statistics at the
    /// target patches; every other patch copied from the input.
    pub recon: Image,
    pub report: LossReport,
}

impl Model {
    pub fn reconstruct(&self, store: &ParamStore<f64>, img: &Image, plan: &MaskPlan) -> Result<Reconstruction> {
        let mut g = Graph::new(store);
        let out = self.forward_loss(&mut g, img, plan)?;
        let tokens = patchify(img, &self.grid)?;
        let target = normalize_targets(&tokens, &out.report.rows, TARGET_EPS)?;
        let pred = g.value(out.pred);
        let mut recon_tokens = tokens.clone();
        let d = tokens.shape()[1];
        for (i, &r) in target.rows.iter().enumerate() {
            let px = crate::patchio::denormalize(pred.row(r), target.mean[i], target.std[i]);
            recon_tokens.data_mut()[r * d..(r + 1) * d].copy_from_slice(&px);
        }
        let mut masked_tokens = tokens;
        let keep = plan.kept_flags();
        let sm = plan.sm_flags();
        for r in 0..self.grid.len() {
            let fill = if sm[r] {
                Some(0.5)
            } else if !keep[r] {
                Some(0.0)
            } else {
                None
            };
            if let Some(v) = fill {
                masked_tokens.data_mut()[r * d..(r + 1) * d].fill(v);
            }
        }
        let recon = crate::patchio::unpatchify(&recon_tokens, &self.grid)?;
        let recon = Image::from_fn(recon.height, recon.width, |c, y, x| recon.at(c, y, x).clamp(0.0, 1.0));
        Ok(Reconstruction {
            masked: crate::patchio::unpatchify(&masked_tokens, &self.grid)?,
            recon,
            report: out.report,
        })
    }
}

/// Fresh f64 parameters for `config`, initialized from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let model = {
        let mut init = Init::new(&mut store, seed);
        Model::new(config, &mut init)?
    };
    Ok((model, store))
}
