use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::patchio::{read_ppm, write_ppm, Image};
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

/// An in-memory image collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub images: Vec<Image>,
}

impl Corpus {
    pub fn new(images: Vec<Image>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("corpus is empty".into()));
        }
        Ok(Corpus { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Every `*.ppm` file of a flat directory, in file-name order.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for e in entries {
            let path = e.map_err(|e| Error::io(dir, e))?.path();
            if path.is_file() && path.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")) {
                paths.push(path);
            }
        }
        paths.sort();
        let images = paths.iter().map(read_ppm).collect::<Result<Vec<_>>>()?;
        if images.is_empty() {
            return Err(Error::InvalidArgument(format!("no .ppm files in {}", dir.display())));
        }
        Corpus::new(images)
    }

    /// Writes `img_0000.ppm`, `img_0001.ppm`, ... into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, img) in self.images.iter().enumerate() {
            write_ppm(img, dir.join(format!("img_{i:04}.ppm")))?;
        }
        Ok(())
    }

    /// Smooth procedural scenes: a color gradient, a low-frequency grating
    /// and a few soft blobs per image.
    pub fn synthetic(count: usize, size: usize, seed: u64) -> Result<Self> {
        let images = (0..count as u64)
            .map(|i| synthetic_image(size, &mut stream_rng(seed, Stream::Corpus, i)))
            .collect();
        Corpus::new(images)
    }

    /// Sample order of `epoch`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream_rng(seed, Stream::Shuffle, epoch));
        order
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    inv2s2: f64,
    color: [f64; 3],
}

fn synthetic_image(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let s = size as f64;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let grad: [[f64; 2]; 3] = std::array::from_fn(|_| [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)]);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let freq = rng.random_range(1.0..3.0) * std::f64::consts::TAU / s;
    let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.15..0.15));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let blobs: Vec<Blob> = (0..rng.random_range(2..5))
        .map(|_| {
            let sigma = rng.random_range(0.08..0.2) * s;
            Blob {
                cy: rng.random_range(0.0..s),
                cx: rng.random_range(0.0..s),
                inv2s2: 1.0 / (2.0 * sigma * sigma),
                color: std::array::from_fn(|_| rng.random_range(-0.4..0.4)),
            }
        })
        .collect();
    let (ct, st) = (theta.cos(), theta.sin());
    Image::from_fn(size, size, |c, y, x| {
        let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut v = base[c] + grad[c][0] * (yf / s - 0.5) + grad[c][1] * (xf / s - 0.5);
        v += amp[c] * ((yf * st + xf * ct) * freq + phase).sin();
        for b in &blobs {
            let d2 = (yf - b.cy).powi(2) + (xf - b.cx).powi(2);
            v += b.color[c] * (-d2 * b.inv2s2).exp();
        }
        v.clamp(0.0, 1.0)
    })
}

/// Crop area and aspect ranges of [`random_resized_crop`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CropConfig {
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            scale: (0.2, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }
}

/// Random area/aspect crop resized bilinearly to `out × out`. Falls back to
/// the largest centered crop within the aspect range after ten rejected
/// draws.
pub fn random_resized_crop(img: &Image, out: usize, cfg: &CropConfig, rng: &mut impl Rng) -> Result<Image> {
    let (h, w) = (img.height as f64, img.width as f64);
    let area = h * w;
    let (lr0, lr1) = (cfg.ratio.0.ln(), cfg.ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(cfg.scale.0..=cfg.scale.1);
        let aspect = rng.random_range(lr0..=lr1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= img.width && ch <= img.height {
            let y0 = rng.random_range(0..=img.height - ch);
            let x0 = rng.random_range(0..=img.width - cw);
            return Ok(img.crop(y0, x0, ch, cw)?.resize_bilinear(out, out));
        }
    }
    let in_ratio = w / h;
    let (cw, ch) = if in_ratio < cfg.ratio.0 {
        (img.width, (w / cfg.ratio.0).round() as usize)
    } else if in_ratio > cfg.ratio.1 {
        ((h * cfg.ratio.1).round() as usize, img.height)
    } else {
        (img.width, img.height)
    };
    let (ch, cw) = (ch.clamp(1, img.height), cw.clamp(1, img.width));
    let y0 = (img.height - ch) / 2;
    let x0 = (img.width - cw) / 2;
    Ok(img.crop(y0, x0, ch, cw)?.resize_bilinear(out, out))
}
