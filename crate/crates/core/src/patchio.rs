//! Images, patch tokens, compact composition, reconstruction targets and the
//! netpbm codecs.
//!
//! Images are RGB, channel-major (`[3, H, W]`), with values in `[0, 1]`.
//! A patch token flattens one `P × P` patch in `(py, px, channel)` order, so
//! its length is `3·P²`.

use std::path::Path;

use crate::masking::{CompactMap, MaskPlan, PatchGrid};
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const CHANNELS: usize = 3;
pub const TARGET_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `[channel][row][col]`.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Checks that the image tiles `grid` exactly.
    pub fn check_grid(&self, grid: &PatchGrid) -> Result<()> {
        let p = grid.patch_size;
        if self.height != grid.rows * p || self.width != grid.cols * p {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} does not match a {}x{} grid of {p}-pixel patches",
                self.height, self.width, grid.rows, grid.cols
            )));
        }
        Ok(())
    }

    /// The `h × w` window with top-left corner `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(h, w, |c, y, x| self.at(c, y0 + y, x0 + x)))
    }

    /// Bilinear resampling to `h × w` with pixel-center alignment.
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Image {
        let sy = self.height as f64 / h as f64;
        let sx = self.width as f64 / w as f64;
        let coord = |o: usize, s: f64, n: usize| {
            let src = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        };
        let ys: Vec<_> = (0..h).map(|y| coord(y, sy, self.height)).collect();
        let xs: Vec<_> = (0..w).map(|x| coord(x, sx, self.width)).collect();
        Image::from_fn(h, w, |c, y, x| {
            let (y0, y1, fy) = ys[y];
            let (x0, x1, fx) = xs[x];
            let top = self.at(c, y0, x0) * (1.0 - fx) + self.at(c, y0, x1) * fx;
            let bot = self.at(c, y1, x0) * (1.0 - fx) + self.at(c, y1, x1) * fx;
            top * (1.0 - fy) + bot * fy
        })
    }
}

pub fn patch_dim(patch_size: usize) -> usize {
    CHANNELS * patch_size * patch_size
}

/// Raster-ordered patch tokens `[rows·cols, 3·P²]`.
pub fn patchify(img: &Image, grid: &PatchGrid) -> Result<Tensor<f64>> {
    img.check_grid(grid)?;
    let p = grid.patch_size;
    let d = patch_dim(p);
    let mut data = Vec::with_capacity(grid.len() * d);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..CHANNELS {
                        data.push(img.at(ch, r * p + py, c * p + px));
                    }
                }
            }
        }
    }
    Tensor::new(vec![grid.len(), d], data)
}

pub fn unpatchify(tokens: &Tensor<f64>, grid: &PatchGrid) -> Result<Image> {
    let p = grid.patch_size;
    if tokens.shape() != [grid.len(), patch_dim(p)] {
        return Err(Error::shape(
            "unpatchify",
            format!("tokens {:?} for a {}x{} grid of {p}-pixel patches", tokens.shape(), grid.rows, grid.cols),
        ));
    }
    let mut img = Image::filled(grid.rows * p, grid.cols * p, 0.0);
    for (n, tok) in tokens.data().chunks_exact(patch_dim(p)).enumerate() {
        let (r, c) = grid.coords(n);
        for py in 0..p {
            for px in 0..p {
                for ch in 0..CHANNELS {
                    img.set(ch, r * p + py, c * p + px, tok[(py * p + px) * CHANNELS + ch]);
                }
            }
        }
    }
    Ok(img)
}

fn copy_patch(src: &Image, dst: &mut Image, p: usize, from: (usize, usize), to: (usize, usize)) {
    for ch in 0..CHANNELS {
        for py in 0..p {
            for px in 0..p {
                let v = src.at(ch, from.0 * p + py, from.1 * p + px);
                dst.set(ch, to.0 * p + py, to.1 * p + px, v);
            }
        }
    }
}

/// Packs the kept patch of every full-grid cell into a half-resolution image.
pub fn compose_compact_image(img: &Image, plan: &MaskPlan, map: &CompactMap) -> Result<Image> {
    let grid = plan.grid;
    img.check_grid(&grid)?;
    if map.compact_rows != grid.compact_rows()
        || map.compact_cols != grid.compact_cols()
        || map.len() != map.compact_rows * map.compact_cols
    {
        return Err(Error::InvalidArgument("compact map does not match the plan's grid".into()));
    }
    let keep = plan.kept_flags();
    let p = grid.patch_size;
    let mut out = Image::filled(img.height / 2, img.width / 2, 0.0);
    for (k, &full) in map.to_compact.iter().enumerate() {
        let (r, c) = grid.coords(full);
        let (i, j) = (k / map.compact_cols, k % map.compact_cols);
        if full >= grid.len() || !keep[full] || (r / 2, c / 2) != (i, j) {
            return Err(Error::InvalidArgument(format!(
                "compact position {k} maps to patch {full}, which is not the kept patch of cell ({i}, {j})"
            )));
        }
        copy_patch(img, &mut out, p, (r, c), (i, j));
    }
    Ok(out)
}

/// Per-patch standardized reconstruction targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconTarget {
    /// Full-grid indices of the target patches.
    pub rows: Vec<usize>,
    /// `[rows.len(), 3·P²]`.
    pub targets: Tensor<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// `(x − mean) / sqrt(var + eps)` independently for each listed patch.
pub fn normalize_targets(tokens: &Tensor<f64>, rows: &[usize], eps: f64) -> Result<ReconTarget> {
    let (n, d) = tokens.dims2()?;
    let mut data = Vec::with_capacity(rows.len() * d);
    let (mut means, mut stds) = (Vec::with_capacity(rows.len()), Vec::with_capacity(rows.len()));
    for &r in rows {
        if r >= n {
            return Err(Error::Index {
                op: "normalize_targets",
                index: r,
                extent: n,
            });
        }
        let x = tokens.row(r);
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let std = (var + eps).sqrt();
        data.extend(x.iter().map(|v| (v - mean) / std));
        means.push(mean);
        stds.push(std);
    }
    Ok(ReconTarget {
        rows: rows.to_vec(),
        targets: Tensor::new(vec![rows.len(), d], data)?,
        mean: means,
        std: stds,
    })
}

/// Inverse of [`normalize_targets`] for one predicted patch.
pub fn denormalize(pred: &[f64], mean: f64, std: f64) -> Vec<f64> {
    pred.iter().map(|v| v * std + mean).collect()
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.height * img.width * CHANNELS);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..CHANNELS {
                out.push(quantize(img.at(c, y, x)));
            }
        }
    }
    out
}

/// Reads the `P5`/`P6` header fields `width height maxval` after `magic`,
/// returning them with the payload offset.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::Format(format!(
            "expected magic {} but found {found:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (f, name) in fields.iter_mut().zip(["width", "height", "maxval"]) {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("missing {name} in header")));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format(format!("{name} out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("header must end with one whitespace byte".into())),
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval} (1..=255 only)")));
    }
    Ok((w, h, maxval, pos))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (w, h, maxval, pos) = parse_header(bytes, b"P6")?;
    let need = w * h * CHANNELS;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::Format(format!(
            "truncated payload: {} of {need} bytes",
            payload.len()
        )));
    }
    let scale = maxval as f64;
    let mut img = Image::filled(h, w, 0.0);
    for (i, px) in payload[..need].chunks_exact(CHANNELS).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            img.set(c, i / w, i % w, v as f64 / scale);
        }
    }
    Ok(img)
}

/// Single-channel 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (w, h, maxval, pos) = parse_header(bytes, b"P5")?;
    let payload = &bytes[pos..];
    if payload.len() < w * h {
        return Err(Error::Format(format!(
            "truncated payload: {} of {} bytes",
            payload.len(),
            w * h
        )));
    }
    let data = payload[..w * h]
        .iter()
        .map(|&v| ((v as usize * 255 + maxval / 2) / maxval) as u8)
        .collect();
    Ok(GrayImage {
        height: h,
        width: w,
        data,
    })
}

/// Mask visualization with one pixel per patch.
pub fn mask_image(plan: &MaskPlan) -> GrayImage {
    GrayImage {
        height: plan.grid.rows,
        width: plan.grid.cols,
        data: plan.levels(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    decode_ppm(&read_file(path.as_ref())?)
}

pub fn write_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_ppm(img))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    decode_pgm(&read_file(path.as_ref())?)
}

pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_pgm(img))
}
