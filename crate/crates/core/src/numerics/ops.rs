//! Kernels and index builders shared by the tape and the model code.

use std::sync::Arc;

use super::element::Element;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::{Error, Result};

pub(crate) fn matmul_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let cr = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            for (cv, bv) in cr.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += aip * *bv;
            }
        }
    }
    c
}

/// Flat gather indices moving `axis` to the end, the inverse indices, and the
/// moved shape.
pub(crate) fn axis_to_last_index(shape: &[usize], axis: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..shape.len()).filter(|&d| d != axis).collect();
    perm.push(axis);
    let moved: Vec<usize> = perm.iter().map(|&d| shape[d]).collect();
    let fwd = permute_index(shape, &perm);
    let mut inv = vec![0; fwd.len()];
    for (o, &i) in fwd.iter().enumerate() {
        inv[i] = o;
    }
    (fwd, inv, moved)
}

/// Gather indices for a general axis permutation: output axis `j` is input
/// axis `perm[j]`.
pub(crate) fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&d| shape[d]).collect();
    let numel: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(numel);
    let mut coord = vec![0usize; rank];
    for _ in 0..numel {
        idx.push(coord.iter().zip(perm).map(|(&c, &d)| c * strides[d]).sum());
        for d in (0..rank).rev() {
            coord[d] += 1;
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    idx
}

/// Gather indices transposing a `[rows, cols]` matrix.
pub fn transpose_index(rows: usize, cols: usize) -> Vec<usize> {
    permute_index(&[rows, cols], &[1, 0])
}

/// Gather indices for `[C·r², H, W] → [C, H·r, W·r]`, with input channel
/// `c·r² + i·r + j` landing at output pixel `(y·r + i, x·r + j)`.
pub fn pixel_shuffle_index(c: usize, r: usize, h: usize, w: usize) -> Vec<usize> {
    let (ho, wo) = (h * r, w * r);
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for yo in 0..ho {
            for xo in 0..wo {
                let (y, i) = (yo / r, yo % r);
                let (x, j) = (xo / r, xo % r);
                let cin = ch * r * r + i * r + j;
                idx.push((cin * h + y) * w + x);
            }
        }
    }
    idx
}

/// Inverse of [`pixel_shuffle_index`]: `[C, H·r, W·r] → [C·r², H, W]`.
pub fn pixel_unshuffle_index(c: usize, r: usize, h: usize, w: usize) -> Vec<usize> {
    let fwd = pixel_shuffle_index(c, r, h, w);
    let mut inv = vec![0; fwd.len()];
    for (o, &i) in fwd.iter().enumerate() {
        inv[i] = o;
    }
    inv
}

fn shuffle_dims(shape: &[usize], r: usize) -> Result<(usize, usize, usize)> {
    let [cr2, h, w] = shape else {
        return Err(Error::shape("pixel_shuffle", format!("expected [C·r², H, W], got {shape:?}")));
    };
    if r == 0 || cr2 % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("channel extent {cr2} not divisible by r²={}", r * r),
        ));
    }
    Ok((cr2 / (r * r), *h, *w))
}

pub fn pixel_shuffle<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (c, h, w) = shuffle_dims(x.shape(), r)?;
    let idx = pixel_shuffle_index(c, r, h, w);
    let xs = x.data();
    Tensor::new(vec![c, h * r, w * r], idx.iter().map(|&i| xs[i]).collect())
}

pub fn pixel_unshuffle<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [c, hr, wr] = x.shape() else {
        return Err(Error::shape("pixel_unshuffle", format!("expected [C, H·r, W·r], got {:?}", x.shape())));
    };
    if r == 0 || hr % r != 0 || wr % r != 0 {
        return Err(Error::shape("pixel_unshuffle", format!("spatial extents not divisible by {r}")));
    }
    let (h, w) = (hr / r, wr / r);
    let idx = pixel_unshuffle_index(*c, r, h, w);
    let xs = x.data();
    Tensor::new(vec![c * r * r, h, w], idx.iter().map(|&i| xs[i]).collect())
}

impl<T: Element> Tape<T> {
    /// Sub-pixel rearrangement `[C·r², H, W] → [C, H·r, W·r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (c, h, w) = shuffle_dims(self.shape(x), r)?;
        let idx = pixel_shuffle_index(c, r, h, w);
        self.gather(x, Arc::new(idx), &[c, h * r, w * r])
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [c, hr, wr] = shape[..] else {
            return Err(Error::shape("pixel_unshuffle", format!("expected rank 3, got {shape:?}")));
        };
        if r == 0 || hr % r != 0 || wr % r != 0 {
            return Err(Error::shape("pixel_unshuffle", format!("spatial extents not divisible by {r}")));
        }
        let idx = pixel_unshuffle_index(c, r, hr / r, wr / r);
        self.gather(x, Arc::new(idx), &[c * r * r, hr / r, wr / r])
    }

    /// Transpose of a rank-2 value.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        self.gather(x, Arc::new(transpose_index(r, c)), &[c, r])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_shuffle_minimal_block() {
        let x = Tensor::<f64>::from_f64(&[4, 1, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_r1_is_identity() {
        let x = Tensor::<f64>::from_fn(&[3, 2, 5], |i| i as f64);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
    }

    #[test]
    fn pixel_shuffle_rejects_indivisible_channels() {
        let x = Tensor::<f64>::zeros(&[6, 2, 2]);
        assert!(matches!(pixel_shuffle(&x, 2), Err(Error::Shape { .. })));
    }

    #[test]
    fn pixel_shuffle_round_trips_exhaustively() {
        for c in 1..=8 {
            for r in 1..=8usize {
                if c * r * r > 64 {
                    continue;
                }
                for h in 1..=8 {
                    for w in 1..=8 {
                        let x = Tensor::<f64>::from_fn(&[c * r * r, h, w], |i| (i as f64).sin());
                        let y = pixel_shuffle(&x, r).unwrap();
                        assert_eq!(pixel_unshuffle(&y, r).unwrap(), x);
                        let z = Tensor::<f64>::from_fn(&[c, h * r, w * r], |i| (i as f64).cos());
                        assert_eq!(pixel_shuffle(&pixel_unshuffle(&z, r).unwrap(), r).unwrap(), z);
                    }
                }
            }
        }
    }

    #[test]
    fn permute_matches_transpose() {
        let idx = transpose_index(2, 3);
        assert_eq!(idx, vec![0, 3, 1, 4, 2, 5]);
    }
}
