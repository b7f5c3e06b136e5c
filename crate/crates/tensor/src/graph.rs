//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value to the tape. `backward`
//! walks the tape in reverse and accumulates adjoints into the `grad` slot of
//! each leaf created with `requires_grad`. Leaf gradients accumulate across
//! repeated `backward` calls until [`Graph::zero_grad`] or [`Graph::reset`].

use crate::error::{Result, TensorError};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn, ConvGeom};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Relu(Var),
    Abs(Var),
    Log { x: Var, floor: T },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    AvgPool(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    CumsumRows(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    // true when any requires_grad leaf is reachable through this node
    tracks: bool,
    grad: Option<Tensor<T>>,
}

/// The tape. One graph per forward pass; reuse it through [`Graph::reset`].
#[derive(Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn dims2(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    match *t {
        [r, c] => Ok((r, c)),
        _ => Err(TensorError::InvalidShape {
            op,
            msg: format!("expected a 2-D tensor, got {t:?}"),
        }),
    }
}

/// Output spatial size of a convolution, `None` when non-positive.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every record; previously issued [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            tracks: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracks = inputs.iter().any(|v| self.nodes[v.0].tracks);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            tracks,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// `x[.., n] + bias[n]`, broadcasting the bias over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.ndim() != 1 || tb.numel() != tx.cols() {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let n = tb.numel();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % n])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `a[m, k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", ta.shape())?;
        let (k2, n) = dims2("matmul", tb.shape())?;
        if k != k2 {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, ta.data(), tb.data(), &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m, k] · b[n, k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul_bt", ta.shape())?;
        let (n, k2) = dims2("matmul_bt", tb.shape())?;
        if k != k2 {
            return Err(shape_err("matmul_bt", ta.shape(), tb.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(m, k, n, ta.data(), tb.data(), &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulBT(a, b), &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(T::abs);
        self.push(t, Op::Abs(x), &[x])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, x: Var, floor: T) -> Var {
        let t = self.value(x).map(|v| v.max(floor).ln());
        self.push(t, Op::Log { x, floor }, &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.log_floor(x, T::min_positive_value())
    }

    /// Softmax over the last axis. `mask` (true = keep) has either one entry
    /// per column, broadcast over rows, or one entry per element. Masked
    /// entries are exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        if let Some(m) = mask {
            if m.len() != cols && m.len() != tx.numel() {
                return Err(TensorError::InvalidShape {
                    op: "softmax",
                    msg: format!("mask of length {} for shape {:?}", m.len(), tx.shape()),
                });
            }
        }
        let keep = |r: usize, c: usize| match mask {
            None => true,
            Some(m) if m.len() == cols => m[c],
            Some(m) => m[r * cols + c],
        };
        let mut out = vec![T::zero(); tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let max = (0..cols)
                .filter(|&c| keep(r, c))
                .map(|c| row[c])
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or(TensorError::InvalidMask { row: r })?;
            let orow = &mut out[r * cols..(r + 1) * cols];
            let mut total = T::zero();
            for c in 0..cols {
                if keep(r, c) {
                    let e = (row[c] - max).exp();
                    orow[c] = e;
                    total = total + e;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / total;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { x }, &[x]))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if tg.numel() != n || tb.numel() != n {
            return Err(shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let nf = T::from_usize(n).unwrap();
        let mut out = vec![T::zero(); tx.numel()];
        let mut means = Vec::with_capacity(tx.rows());
        let mut rstds = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + eps).sqrt();
            for c in 0..n {
                out[r * n + c] = (row[c] - mean) * rstd * tg.data()[c] + tb.data()[c];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm { x, gain, bias, mean: means, rstd: rstds },
            &[x, gain, bias],
        ))
    }

    /// Cross-correlation of `x[B, C, H, W]` (or `[C, H, W]`) with
    /// `w[O, C, kh, kw]` plus `b[O]`, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (batch, c, h, wd, single) = match *tx.shape() {
            [c, h, w] => (1, c, h, w, true),
            [n, c, h, w] => (n, c, h, w, false),
            _ => return Err(shape_err("conv2d", tx.shape(), tw.shape())),
        };
        let (o, kc, kh, kw) = match *tw.shape() {
            [o, kc, kh, kw] => (o, kc, kh, kw),
            _ => return Err(shape_err("conv2d", tx.shape(), tw.shape())),
        };
        if kc != c || tb.numel() != o {
            return Err(shape_err("conv2d", tx.shape(), tw.shape()));
        }
        let (ho, wo) = match (conv_out_dim(h, kh, stride, pad), conv_out_dim(wd, kw, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(TensorError::InvalidShape {
                    op: "conv2d",
                    msg: format!(
                        "non-positive output for input {:?}, kernel {kh}x{kw}, stride {stride}, pad {pad}",
                        tx.shape()
                    ),
                })
            }
        };
        let (xd, wdat, bd) = (tx.data(), tw.data(), tb.data());
        let geom = ConvGeom { c, h, w: wd, kh, kw, ho, wo, stride, pad };
        let (rows, cols) = (geom.patch_rows(), geom.patch_cols());
        let width = batch * cols;
        let patches = geom.im2col_batch(xd, batch);
        // [o, B*cols] product, then reordered to [B, o, cols]
        let mut prod = vec![T::zero(); o * width];
        gemm_nn(o, rows, width, wdat, &patches, &mut prod);
        let mut out = vec![T::zero(); batch * o * cols];
        for n in 0..batch {
            for oc in 0..o {
                let src = &prod[oc * width + n * cols..oc * width + (n + 1) * cols];
                for (d, &v) in out[(n * o + oc) * cols..(n * o + oc + 1) * cols].iter_mut().zip(src) {
                    *d = v + bd[oc];
                }
            }
        }
        let shape = if single { vec![o, ho, wo] } else { vec![batch, o, ho, wo] };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, &[x, w, b]))
    }

    /// Global average pooling `[B, C, H, W] -> [B, C]`.
    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [b, c, h, w] = *tx.shape() else {
            return Err(TensorError::InvalidShape {
                op: "avg_pool",
                msg: format!("expected [B, C, H, W], got {:?}", tx.shape()),
            });
        };
        let area = T::from_usize(h * w).unwrap();
        let data = tx.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / area).collect();
        let t = Tensor::new(vec![b, c], data)?;
        Ok(self.push(t, Op::AvgPool(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = dims2("slice_cols", tx.shape())?;
        if len == 0 || start + len > c {
            return Err(TensorError::InvalidShape {
                op: "slice_cols",
                msg: format!("columns {start}..{} of {c}", start + len),
            });
        }
        let data = (0..r).flat_map(|i| tx.row(i)[start..start + len].iter().copied()).collect();
        let t = Tensor::new(vec![r, len], data)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidShape {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let (r, _) = dims2("concat_cols", self.value(*first).shape())?;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = dims2("concat_cols", self.value(*p).shape())?;
            if pr != r {
                return Err(shape_err("concat_cols", self.value(*first).shape(), self.value(*p).shape()));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let t = Tensor::new(vec![r, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Running sum along the last axis.
    pub fn cumsum_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(tx.cols()) {
            let mut acc = T::zero();
            for v in row.iter_mut() {
                acc = acc + *v;
                *v = acc;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::CumsumRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor::scalar(tx.sum() / T::from_usize(tx.numel()).unwrap());
        self.push(t, Op::Mean(x), &[x])
    }

    /// `x · W + b` for `x[m, in]`, `W[in, out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape });
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.tracks {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let out = node.value.data();
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, nodes, *a, |d| add_into(d, &g));
                    accumulate(&mut adj, nodes, *b, |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, nodes, *a, |d| add_into(d, &g));
                    accumulate(&mut adj, nodes, *b, |d| {
                        d.iter_mut().zip(&g).for_each(|(d, &g)| *d = *d - g)
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    accumulate(&mut adj, nodes, *a, |d| {
                        for k in 0..d.len() {
                            d[k] = d[k] + g[k] * vb[k];
                        }
                    });
                    accumulate(&mut adj, nodes, *b, |d| {
                        for k in 0..d.len() {
                            d[k] = d[k] + g[k] * va[k];
                        }
                    });
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adj, nodes, *a, |d| {
                        d.iter_mut().zip(&g).for_each(|(d, &g)| *d = *d + g * *c)
                    });
                }
                Op::AddBias(x, b) => {
                    accumulate(&mut adj, nodes, *x, |d| add_into(d, &g));
                    accumulate(&mut adj, nodes, *b, |d| {
                        let n = d.len();
                        for (k, &gv) in g.iter().enumerate() {
                            d[k % n] = d[k % n] + gv;
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    let (ad, bd) = (ta.data(), tb.data());
                    accumulate(&mut adj, nodes, *a, |da| gemm_nt(m, n, k, &g, bd, da));
                    accumulate(&mut adj, nodes, *b, |db| gemm_tn(k, m, n, ad, &g, db));
                }
                Op::MatMulBT(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[0];
                    let (ad, bd) = (ta.data(), tb.data());
                    accumulate(&mut adj, nodes, *a, |da| gemm_nn(m, n, k, &g, bd, da));
                    accumulate(&mut adj, nodes, *b, |db| gemm_tn(n, m, k, &g, ad, db));
                }
                Op::Relu(x) => {
                    accumulate(&mut adj, nodes, *x, |d| {
                        for k in 0..d.len() {
                            if out[k] > T::zero() {
                                d[k] = d[k] + g[k];
                            }
                        }
                    });
                }
                Op::Abs(x) => {
                    let xv = nodes[x.0].value.data();
                    accumulate(&mut adj, nodes, *x, |d| {
                        for k in 0..d.len() {
                            let s = if xv[k] > T::zero() {
                                T::one()
                            } else if xv[k] < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            d[k] = d[k] + g[k] * s;
                        }
                    });
                }
                Op::Log { x, floor } => {
                    let xv = nodes[x.0].value.data();
                    accumulate(&mut adj, nodes, *x, |d| {
                        for k in 0..d.len() {
                            if xv[k] > *floor {
                                d[k] = d[k] + g[k] / xv[k];
                            }
                        }
                    });
                }
                Op::Softmax { x } => {
                    let cols = node.value.cols();
                    accumulate(&mut adj, nodes, *x, |d| {
                        for (r, (yrow, grow)) in out.chunks(cols).zip(g.chunks(cols)).enumerate() {
                            let dot = yrow.iter().zip(grow).fold(T::zero(), |s, (&y, &gv)| s + y * gv);
                            for c in 0..cols {
                                let k = r * cols + c;
                                d[k] = d[k] + yrow[c] * (grow[c] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, mean, rstd } => {
                    let xv = &nodes[x.0].value;
                    let gv = nodes[gain.0].value.data();
                    let n = xv.cols();
                    let nf = T::from_usize(n).unwrap();
                    let xhat = |r: usize, c: usize| (xv.data()[r * n + c] - mean[r]) * rstd[r];
                    accumulate(&mut adj, nodes, *gain, |d| {
                        for r in 0..xv.rows() {
                            for c in 0..n {
                                d[c] = d[c] + g[r * n + c] * xhat(r, c);
                            }
                        }
                    });
                    accumulate(&mut adj, nodes, *bias, |d| {
                        for r in 0..xv.rows() {
                            for c in 0..n {
                                d[c] = d[c] + g[r * n + c];
                            }
                        }
                    });
                    accumulate(&mut adj, nodes, *x, |d| {
                        for r in 0..xv.rows() {
                            let mut sum_dh = T::zero();
                            let mut sum_dh_xh = T::zero();
                            for c in 0..n {
                                let dh = g[r * n + c] * gv[c];
                                sum_dh = sum_dh + dh;
                                sum_dh_xh = sum_dh_xh + dh * xhat(r, c);
                            }
                            for c in 0..n {
                                let dh = g[r * n + c] * gv[c];
                                let v = rstd[r] / nf * (nf * dh - sum_dh - xhat(r, c) * sum_dh_xh);
                                d[r * n + c] = d[r * n + c] + v;
                            }
                        }
                    });
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    conv2d_backward(&mut adj, nodes, &g, node.value.shape(), *x, *w, *b, *stride, *pad);
                }
                Op::AvgPool(x) => {
                    let sh = nodes[x.0].value.shape();
                    let area = sh[2] * sh[3];
                    let af = T::from_usize(area).unwrap();
                    accumulate(&mut adj, nodes, *x, |d| {
                        for (k, &gv) in g.iter().enumerate() {
                            for v in &mut d[k * area..(k + 1) * area] {
                                *v = *v + gv / af;
                            }
                        }
                    });
                }
                Op::Reshape(x) => {
                    accumulate(&mut adj, nodes, *x, |d| add_into(d, &g));
                }
                Op::SliceCols { x, start } => {
                    let src_cols = nodes[x.0].value.cols();
                    let len = node.value.cols();
                    accumulate(&mut adj, nodes, *x, |d| {
                        for (r, grow) in g.chunks(len).enumerate() {
                            let drow = &mut d[r * src_cols + start..r * src_cols + start + len];
                            add_into(drow, grow);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pc = nodes[p.0].value.cols();
                        accumulate(&mut adj, nodes, *p, |d| {
                            for (r, drow) in d.chunks_mut(pc).enumerate() {
                                add_into(drow, &g[r * total + offset..r * total + offset + pc]);
                            }
                        });
                        offset += pc;
                    }
                }
                Op::CumsumRows(x) => {
                    let cols = node.value.cols();
                    accumulate(&mut adj, nodes, *x, |d| {
                        for (drow, grow) in d.chunks_mut(cols).zip(g.chunks(cols)) {
                            let mut acc = T::zero();
                            for c in (0..cols).rev() {
                                acc = acc + grow[c];
                                drow[c] = drow[c] + acc;
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    accumulate(&mut adj, nodes, *x, |d| d.iter_mut().for_each(|v| *v = *v + g[0]));
                }
                Op::Mean(x) => {
                    let n = T::from_usize(nodes[x.0].value.numel()).unwrap();
                    accumulate(&mut adj, nodes, *x, |d| d.iter_mut().for_each(|v| *v = *v + g[0] / n));
                }
            }
        }

        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if !node.requires_grad {
                continue;
            }
            if let Some(a) = a {
                match &mut node.grad {
                    Some(existing) => add_into(existing.data_mut(), &a),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), a)?),
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn accumulate<T: Scalar>(
    adj: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    let node = &nodes[v.0];
    if !node.tracks {
        return;
    }
    let slot = adj[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
    f(slot);
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    adj: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    g: &[T],
    out_shape: &[usize],
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
) {
    let tx = &nodes[x.0].value;
    let tw = &nodes[w.0].value;
    let (batch, c, h, wd) = match *tx.shape() {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => unreachable!("validated in forward"),
    };
    let [o, _, kh, kw] = *tw.shape() else { unreachable!("validated in forward") };
    let (ho, wo) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
    let (xd, wdat) = (tx.data(), tw.data());

    let geom = ConvGeom { c, h, w: wd, kh, kw, ho, wo, stride, pad };
    let (rows, cols) = (geom.patch_rows(), geom.patch_cols());
    let width = batch * cols;
    // output gradient reordered to [o, B*cols] to match the patch matrix
    let mut gp = vec![T::zero(); o * width];
    for n in 0..batch {
        for oc in 0..o {
            gp[oc * width + n * cols..oc * width + (n + 1) * cols]
                .copy_from_slice(&g[(n * o + oc) * cols..(n * o + oc + 1) * cols]);
        }
    }
    accumulate(adj, nodes, b, |db| {
        for oc in 0..o {
            db[oc] = db[oc] + gp[oc * width..(oc + 1) * width].iter().copied().sum::<T>();
        }
    });
    accumulate(adj, nodes, w, |dw| {
        let patches = geom.im2col_batch(xd, batch);
        gemm_nt(o, width, rows, &gp, &patches, dw);
    });
    accumulate(adj, nodes, x, |dx| {
        let mut dpatches = vec![T::zero(); rows * width];
        gemm_tn(rows, o, width, wdat, &gp, &mut dpatches);
        geom.col2im_batch(&dpatches, batch, dx);
    });
}
