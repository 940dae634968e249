use std::sync::Arc;

use super::element::Element;
use super::ops;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        row: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    GatherRows {
        x: Var,
        rows: Arc<Vec<usize>>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SegmentMean {
        x: Var,
        segments: Arc<Vec<Vec<usize>>>,
    },
    Sum {
        x: Var,
    },
    MaskedMse {
        pred: Var,
        target: Arc<Tensor<T>>,
        rows: Arc<Vec<usize>>,
    },
    MaskedL1 {
        pred: Var,
        target: Arc<Tensor<T>>,
        rows: Arc<Vec<usize>>,
    },
    Reshape {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Engine counters for one tape.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TapeStats {
    /// Multiply-accumulates performed by forward matrix products.
    pub macs: u64,
    /// Bytes currently held by recorded values (and gradients during backward).
    pub live_bytes: usize,
    /// High-water mark of `live_bytes`.
    pub peak_bytes: usize,
    pub ops: usize,
}

/// Recorded computation sequence with explicit backward rules.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    stats: TapeStats,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu_scalar<T: Element>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            stats: TapeStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> TapeStats {
        self.stats
    }

    fn account(&mut self, bytes: usize) {
        self.stats.live_bytes += bytes;
        self.stats.peak_bytes = self.stats.peak_bytes.max(self.stats.live_bytes);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut bytes = value.size_bytes();
        if let Op::LayerNorm { xhat, rstd, .. } = &op {
            bytes += (xhat.len() + rstd.len()) * std::mem::size_of::<T>();
        }
        self.account(bytes);
        self.push_unaccounted(value, op, requires_grad)
    }

    fn push_unaccounted(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.stats.ops += 1;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Records an input. Non-finite inputs are rejected.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", &value)?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records a trainable parameter. Its value is owned by the parameter
    /// store, so it is not counted in `live_bytes`; its gradient is.
    pub fn param_leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        check_finite("leaf", &value)?;
        Ok(self.push_unaccounted(value, Op::Leaf, true))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| Error::shape(op, format!("expected rank 2, got {:?}", self.shape(v))))
    }

    /// `a [m,k] · b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = ops::matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        self.stats.macs += (m * k * n) as u64;
        let t = Tensor::new(vec![m, n], out)?;
        check_finite("matmul", &t)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul { a, b, trans_b: false }, rg))
    }

    /// `a [m,k] · bᵀ` with `b [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bd[j * k..(j + 1) * k]);
            }
        }
        self.stats.macs += (m * k * n) as u64;
        let t = Tensor::new(vec![m, n], out)?;
        check_finite("matmul_nt", &t)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul { a, b, trans_b: true }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        check_finite("add", &t)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        check_finite("mul", &t)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// Adds a length-`D` vector to every row of `x [N, D]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, d) = self.dims2("add_row", x)?;
        if self.value(row).numel() != d {
            return Err(Error::shape(
                "add_row",
                format!("row of {:?} onto {:?}", self.shape(row), self.shape(x)),
            ));
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(d)
            .flat_map(|xr| xr.iter().zip(r).map(|(a, b)| *a + *b))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        check_finite("add_row", &t)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(t, Op::AddRow { x, row }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| *v * s).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        check_finite("scale", &t)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Scale { x, s }, rg))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| gelu_scalar(*v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        check_finite("gelu", &t)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gelu { x }, rg))
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of bounds for rank {}",
                shape.len()
            )));
        }
        if axis == shape.len() - 1 {
            return self.masked_softmax(x, None);
        }
        // Move `axis` last, apply, move it back.
        let (fwd, inv, moved) = ops::axis_to_last_index(&shape, axis);
        let xm = self.gather(x, Arc::new(fwd), &moved)?;
        let y = self.masked_softmax(xm, None)?;
        self.gather(y, Arc::new(inv), &shape)
    }

    /// Softmax along the last axis. Entries whose `keep` flag is false are
    /// excluded from the support: they get exactly zero probability and never
    /// enter the max or the normalizer. A row with no kept entry is all zeros.
    pub fn masked_softmax(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("softmax", "rank 0 input"))?;
        if let Some(k) = keep {
            if k.len() != self.value(x).numel() {
                return Err(Error::shape("softmax", "mask length differs from input"));
            }
        }
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for (r, (xr, yr)) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
            let kr = keep.map(|k| &k[r * d..(r + 1) * d]);
            let on = |j: usize| kr.is_none_or(|k| k[j]);
            let mut mx = T::neg_infinity();
            for (j, v) in xr.iter().enumerate() {
                if on(j) && *v > mx {
                    mx = *v;
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut z = T::zero();
            for (j, (v, y)) in xr.iter().zip(yr.iter_mut()).enumerate() {
                if on(j) {
                    *y = (*v - mx).exp();
                    z += *y;
                }
            }
            for y in yr.iter_mut() {
                *y = *y / z;
            }
        }
        let t = Tensor::new(shape, out)?;
        check_finite("softmax", &t)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x }, rg))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", "rank 0 input"))?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} vs last axis {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = T::lit(eps);
        let inv_d = T::one() / T::from_usize(d).expect("extent");
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xs = self.value(x).data();
        let rows = xs.len() / d.max(1);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let xr = &xs[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
            let rs = if var + eps > T::zero() {
                T::one() / (var + eps).sqrt()
            } else {
                // eps = 0 with a constant row: the row is its own mean.
                T::zero()
            };
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(shape, out)?;
        check_finite("layer_norm", &t)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Element gather: `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if index.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("gather", "index length differs from output shape"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                op: "gather",
                index: bad,
                extent: n,
            });
        }
        let xs = self.value(x).data();
        let data = index.iter().map(|&i| xs[i]).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gather { x, index }, rg))
    }

    /// Row gather on `x [N, D]`: `out[i] = x[rows[i]]`. Duplicate rows are
    /// allowed; their gradients accumulate.
    pub fn gather_rows(&mut self, x: Var, rows: Arc<Vec<usize>>) -> Result<Var> {
        let (n, d) = self.dims2("gather_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                extent: n,
            });
        }
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows.iter() {
            data.extend_from_slice(&xs[r * d..(r + 1) * d]);
        }
        let t = Tensor::new(vec![rows.len(), d], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherRows { x, rows }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.dims2("concat_rows", parts[0])?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, dp) = self.dims2("concat_rows", p)?;
            if dp != d {
                return Err(Error::shape("concat_rows", format!("width {dp} vs {d}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, d], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            t,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, w) = self.dims2("concat_cols", p)?;
            if r != n {
                return Err(Error::shape("concat_cols", format!("rows {r} vs {n}")));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![n, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            t,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `[start, start + len)` of `x [N, D]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims2("slice_cols", x)?;
        if start + len > d {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + len,
                extent: d,
            });
        }
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xs[i * d + start..i * d + start + len]);
        }
        let t = Tensor::new(vec![n, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    /// `out[g] = mean(x[segments[g]])` over rows of `x [N, D]`.
    pub fn segment_mean(&mut self, x: Var, segments: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let (n, d) = self.dims2("segment_mean", x)?;
        let xs = self.value(x).data();
        let mut data = vec![T::zero(); segments.len() * d];
        for (g, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "segment_mean: segment {g} is empty"
                )));
            }
            let out = &mut data[g * d..(g + 1) * d];
            for &r in seg {
                if r >= n {
                    return Err(Error::Index {
                        op: "segment_mean",
                        index: r,
                        extent: n,
                    });
                }
                for (o, v) in out.iter_mut().zip(&xs[r * d..(r + 1) * d]) {
                    *o += *v;
                }
            }
            let inv = T::one() / T::from_usize(seg.len()).expect("count");
            out.iter_mut().for_each(|o| *o = *o * inv);
        }
        let t = Tensor::new(vec![segments.len(), d], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SegmentMean { x, segments }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        check_finite("sum", &t)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Sum { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    fn check_loss_args(
        &self,
        op: &'static str,
        pred: Var,
        target: &Tensor<T>,
        rows: &[usize],
    ) -> Result<(usize, usize)> {
        let (n, d) = self.dims2(op, pred)?;
        if rows.is_empty() {
            return Err(Error::EmptyLossSupport);
        }
        if target.shape() != [rows.len(), d] {
            return Err(Error::shape(
                op,
                format!("target {:?} for {} rows of width {d}", target.shape(), rows.len()),
            ));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index {
                op,
                index: bad,
                extent: n,
            });
        }
        Ok((n, d))
    }

    /// Mean over `rows` of the per-row mean squared error against `target`,
    /// whose row `i` is the target for `pred[rows[i]]`. Rows not listed have
    /// no influence on the value or the gradient.
    pub fn masked_mse(&mut self, pred: Var, target: Arc<Tensor<T>>, rows: Arc<Vec<usize>>) -> Result<Var> {
        let (_, d) = self.check_loss_args("masked_mse", pred, &target, &rows)?;
        let p = self.value(pred).data();
        let mut total = T::zero();
        for (i, &r) in rows.iter().enumerate() {
            let e: T = p[r * d..(r + 1) * d]
                .iter()
                .zip(target.row(i))
                .map(|(a, b)| (*a - *b) * (*a - *b))
                .sum();
            total += e;
        }
        let denom = T::from_usize(rows.len() * d).expect("count");
        let t = Tensor::scalar(total / denom);
        check_finite("masked_mse", &t)?;
        let rg = self.rg(pred);
        Ok(self.push(t, Op::MaskedMse { pred, target, rows }, rg))
    }

    /// L1 counterpart of [`Tape::masked_mse`].
    pub fn masked_l1(&mut self, pred: Var, target: Arc<Tensor<T>>, rows: Arc<Vec<usize>>) -> Result<Var> {
        let (_, d) = self.check_loss_args("masked_l1", pred, &target, &rows)?;
        let p = self.value(pred).data();
        let mut total = T::zero();
        for (i, &r) in rows.iter().enumerate() {
            let e: T = p[r * d..(r + 1) * d]
                .iter()
                .zip(target.row(i))
                .map(|(a, b)| (*a - *b).abs())
                .sum();
            total += e;
        }
        let denom = T::from_usize(rows.len() * d).expect("count");
        let t = Tensor::scalar(total / denom);
        check_finite("masked_l1", &t)?;
        let rg = self.rg(pred);
        Ok(self.push(t, Op::MaskedL1 { pred, target, rows }, rg))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&mut self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.shape(output)),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let elem = std::mem::size_of::<T>();
        grads[output.0] = Some(vec![T::one()]);
        self.account(elem);

        // Allocates (and accounts) a zeroed gradient buffer on first touch.
        fn slot<'g, T: Element>(
            grads: &'g mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            stats: &mut TapeStats,
            v: Var,
        ) -> Option<&'g mut Vec<T>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            if grads[v.0].is_none() {
                let len = nodes[v.0].value.numel();
                stats.live_bytes += len * std::mem::size_of::<T>();
                stats.peak_bytes = stats.peak_bytes.max(stats.live_bytes);
                grads[v.0] = Some(vec![T::zero(); len]);
            }
            grads[v.0].as_mut()
        }

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let nodes = &self.nodes;
            let stats = &mut self.stats;
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b, trans_b } => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    let (m, k) = nodes[a.0].value.dims2()?;
                    let n = node.value.shape()[1];
                    if let Some(ga) = slot(&mut grads, nodes, stats, *a) {
                        if *trans_b {
                            // dA = dC · B, B [n,k]
                            for i in 0..m {
                                let gr = &mut ga[i * k..(i + 1) * k];
                                for j in 0..n {
                                    axpy(gy[i * n + j], &bv[j * k..(j + 1) * k], gr);
                                }
                            }
                        } else {
                            // dA = dC · Bᵀ, B [k,n]
                            for i in 0..m {
                                let gyr = &gy[i * n..(i + 1) * n];
                                for p in 0..k {
                                    ga[i * k + p] += dot(gyr, &bv[p * n..(p + 1) * n]);
                                }
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, stats, *b) {
                        if *trans_b {
                            // dB = dCᵀ · A
                            for i in 0..m {
                                let ar = &av[i * k..(i + 1) * k];
                                for j in 0..n {
                                    axpy(gy[i * n + j], ar, &mut gb[j * k..(j + 1) * k]);
                                }
                            }
                        } else {
                            // dB = Aᵀ · dC
                            for i in 0..m {
                                let gyr = &gy[i * n..(i + 1) * n];
                                for p in 0..k {
                                    axpy(av[i * k + p], gyr, &mut gb[p * n..(p + 1) * n]);
                                }
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for v in [*a, *b] {
                        if let Some(g) = slot(&mut grads, nodes, stats, v) {
                            for (gi, yi) in g.iter_mut().zip(&gy) {
                                *gi += *yi;
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(g) = slot(&mut grads, nodes, stats, *a) {
                        for ((gi, yi), bi) in g.iter_mut().zip(&gy).zip(bv) {
                            *gi += *yi * *bi;
                        }
                    }
                    if let Some(g) = slot(&mut grads, nodes, stats, *b) {
                        for ((gi, yi), ai) in g.iter_mut().zip(&gy).zip(av) {
                            *gi += *yi * *ai;
                        }
                    }
                }
                Op::AddRow { x, row } => {
                    let d = nodes[row.0].value.numel();
                    if let Some(g) = slot(&mut grads, nodes, stats, *x) {
                        for (gi, yi) in g.iter_mut().zip(&gy) {
                            *gi += *yi;
                        }
                    }
                    if let Some(g) = slot(&mut grads, nodes, stats, *row) {
                        for yr in gy.chunks_exact(d) {
                            for (gi, yi) in g.iter_mut().zip(yr) {
                                *gi += *yi;
                            }
                        }
                    }
                }
                Op::Scale { x, s } => {
                    if let Some(g) = slot(&mut grads, nodes, stats, *x) {
                        for (gi, yi) in g.iter_mut().zip(&gy) {
                            *gi += *yi * *s;
                        }
                    }
                }
                Op::Gelu { x } => {
                    let xv = nodes[x.0].value.data();
                    if let Some(g) = slot(&mut grads, nodes, stats, *x) {
                        for ((gi, yi), xi) in g.iter_mut().zip(&gy).zip(xv) {
                            *gi += *yi * gelu_grad(*xi);
                        }
                    }
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let d = *node.value.shape().last().expect("rank");
                    if let Some(g) = slot(&mut grads, nodes, stats, *x) {
                        for ((gr, yr), dyr) in g
                            .chunks_exact_mut(d)
                            .zip(y.chunks_exact(d))
                            .zip(gy.chunks_exact(d))
                        {
                            let s: T = yr.iter().zip(dyr).map(|(a, b)| *a * *b).sum();
                            for ((gi, yi), dyi) in gr.iter_mut().zip(yr).zip(dyr) {
                                *gi += *yi * (*dyi - s);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = nodes[gamma.0].value.numel();
                    let gv = nodes[gamma.0].value.data();
                    if let Some(gg) = slot(&mut grads, nodes, stats, *gamma) {
                        for (yr, hr) in gy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                gg[j] += yr[j] * hr[j];
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, stats, *beta) {
                        for yr in gy.chunks_exact(d) {
                            for j in 0..d {
                                gb[j] += yr[j];
                            }
                        }
                    }
                    if let Some(gx) = slot(&mut grads, nodes, stats, *x) {
                        let inv_d = T::one() / T::from_usize(d).expect("extent");
                        for (r, ((gxr, yr), hr)) in gx
                            .chunks_exact_mut(d)
                            .zip(gy.chunks_exact(d))
                            .zip(xhat.chunks_exact(d))
                            .enumerate()
                        {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..d {
                                let dh = yr[j] * gv[j];
                                m1 += dh;
                                m2 += dh * hr[j];
                            }
                            m1 = m1 * inv_d;
                            m2 = m2 * inv_d;
                            for j in 0..d {
                                let dh = yr[j] * gv[j];
                                gxr[j] += rstd[r] * (dh - m1 - hr[j] * m2);
                            }
                        }
                    }
                }
                Op::Gather { x, index } => {
                    if let Some(g) = slot(&mut grads, nodes, stats, *x) {
                        for (&i, yi) in index.iter().zip(&gy) {
                            g[i] += *yi;
                        }
                    }
                }
                Op::GatherRows { x, rows } => {
                    let d = node.value.shape()[1];
                    if let Some(g) = slot(&mut grads, nodes, stats, *x) {
                        for (&r, yr) in rows.iter().zip(gy.chunks_exact(d.max(1))) {
                            for (gi, yi) in g[r * d..(r + 1) * d].iter_mut().zip(yr) {
                                *gi += *yi;
                            }
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.numel();
                        if let Some(g) = slot(&mut grads, nodes, stats, p) {
                            for (gi, yi) in g.iter_mut().zip(&gy[off..off + len]) {
                                *gi += *yi;
                            }
                        }
                        off += len;
                    }
                }
                Op::ConcatCols { parts } => {
                    let rows = node.value.shape()[0];
                    let total = node.value.shape()[1];
                    let mut off = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.shape()[1];
                        if let Some(g) = slot(&mut grads, nodes, stats, p) {
                            for i in 0..rows {
                                for j in 0..w {
                                    g[i * w + j] += gy[i * total + off + j];
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, len) = (node.value.shape()[0], node.value.shape()[1]);
                    let d = nodes[x.0].value.shape()[1];
                    if let Some(g) = slot(&mut grads, nodes, stats, *x) {
                        for i in 0..rows {
                            for j in 0..len {
                                g[i * d + start + j] += gy[i * len + j];
                            }
                        }
                    }
                }
                Op::SegmentMean { x, segments } => {
                    let d = node.value.shape()[1];
                    if let Some(g) = slot(&mut grads, nodes, stats, *x) {
                        for (s, seg) in segments.iter().enumerate() {
                            let inv = T::one() / T::from_usize(seg.len()).expect("count");
                            let yr = &gy[s * d..(s + 1) * d];
                            for &r in seg {
                                axpy(inv, yr, &mut g[r * d..(r + 1) * d]);
                            }
                        }
                    }
                }
                Op::Sum { x } => {
                    if let Some(g) = slot(&mut grads, nodes, stats, *x) {
                        g.iter_mut().for_each(|gi| *gi += gy[0]);
                    }
                }
                Op::MaskedMse { pred, target, rows } => {
                    let d = nodes[pred.0].value.shape()[1];
                    let p = nodes[pred.0].value.data();
                    let scale = gy[0] * T::lit(2.0) / T::from_usize(rows.len() * d).expect("count");
                    if let Some(g) = slot(&mut grads, nodes, stats, *pred) {
                        for (i, &r) in rows.iter().enumerate() {
                            for (j, tv) in target.row(i).iter().enumerate() {
                                g[r * d + j] += scale * (p[r * d + j] - *tv);
                            }
                        }
                    }
                }
                Op::MaskedL1 { pred, target, rows } => {
                    let d = nodes[pred.0].value.shape()[1];
                    let p = nodes[pred.0].value.data();
                    let scale = gy[0] / T::from_usize(rows.len() * d).expect("count");
                    if let Some(g) = slot(&mut grads, nodes, stats, *pred) {
                        for (i, &r) in rows.iter().enumerate() {
                            for (j, tv) in target.row(i).iter().enumerate() {
                                let diff = p[r * d + j] - *tv;
                                let sgn = if diff > T::zero() {
                                    T::one()
                                } else if diff < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                };
                                g[r * d + j] += scale * sgn;
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    if let Some(g) = slot(&mut grads, nodes, stats, *x) {
                        for (gi, yi) in g.iter_mut().zip(&gy) {
                            *gi += *yi;
                        }
                    }
                }
            }
            // Only leaves keep their gradient; interior buffers are released.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(gy);
            } else {
                self.stats.live_bytes -= gy.len() * elem;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}
