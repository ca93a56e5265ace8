//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns a [`Gradients`]
//! table keyed by [`Var`]. Only the handful of operations the model needs are
//! supported, and there is no broadcasting: binary elementwise operations
//! require identical shapes.
//!
//! ```
//! use deml::autodiff::Graph;
//! use deml::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::vector(&[1.5, -2.0]));
//! let y = g.grad_reverse(x);
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(g.value(y).data(), &[1.5, -2.0]);
//! assert_eq!(grads.get(x).unwrap(), &[-1.0, -1.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{Tensor, DEGENERATE_NORM};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sum(Var),
    Reshape(Var),
    GradReverse(Var),
    Conv2d { x: Var, kernels: Var, geom: ConvGeom, cols: Vec<f64> },
    AvgPool { x: Var, planes: usize, area: usize },
    ChannelScale { u: Var, gate: Var, area: usize },
    Concat { parts: Vec<Var>, widths: Vec<usize>, rows: usize },
    SliceLast { a: Var, start: usize, width: usize, rows: usize },
    NormalizeRows { a: Var, rows: usize, cols: usize, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Geometry of a 3×3, zero-padded convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// Output columns `lo..hi` whose tap at kernel column `kx` lands inside the input.
    fn valid_range(out: usize, input: usize, stride: usize, k: usize) -> (usize, usize) {
        let lo = if k == 0 { 1 } else { 0 };
        let last = input as isize - k as isize; // need ox*stride <= input - k
        let hi = if last < 0 { 0 } else { (last as usize / stride + 1).min(out) };
        (lo.min(hi), hi)
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if the loss does
    /// not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get), but yields zeros for unreached nodes.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. The gradient buffer of `t`, if any, is dropped.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.clear_grad();
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape(), data).expect("same shape");
        self.push(value, op)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, op))
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let value = Tensor::new(&[cols, rows], out)?;
        Ok(self.push(value, Op::Transpose { a, rows, cols }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x < 0.0 { 0.0 } else { x }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        Ok(self.sum(sq))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Identity going forward; negates the gradient going backward.
    pub fn grad_reverse(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::GradReverse(a))
    }

    /// 3×3 convolution with zero padding 1.
    ///
    /// `x` is `[C_in, H, W]` or `[N, C_in, H, W]`, `kernels` is
    /// `[C_out, C_in, 3, 3]`, and `stride` is 1 or 2. The output keeps the
    /// batch layout of `x` with spatial size `ceil(H / stride) × ceil(W / stride)`.
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernels).to_vec();
        let (batch, c_in, h, w) = match sx.as_slice() {
            &[c, h, w] => (1, c, h, w),
            &[n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::dim("conv2d", format!("input shape {sx:?}"))),
        };
        if sk.len() != 4 || sk[2] != 3 || sk[3] != 3 {
            return Err(Error::dim("conv2d", format!("kernel shape {sk:?}, expected [C_out, C_in, 3, 3]")));
        }
        if sk[1] != c_in {
            return Err(Error::dim(
                "conv2d",
                format!("kernels expect {} input channels, input has {c_in}", sk[1]),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::Parameter(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        if h < 3 || w < 3 {
            return Err(Error::dim("conv2d", format!("spatial size {h}×{w} below 3×3")));
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out: sk[0],
            stride,
            oh: h.div_ceil(stride),
            ow: w.div_ceil(stride),
        };
        let (out, cols) = conv_forward(self.data(x), self.data(kernels), &geom);
        let shape = if sx.len() == 3 {
            vec![geom.c_out, geom.oh, geom.ow]
        } else {
            vec![batch, geom.c_out, geom.oh, geom.ow]
        };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Conv2d { x, kernels, geom, cols }))
    }

    /// Spatial average pooling: `[.., C, H, W] → [.., C]`.
    pub fn spatial_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::dim("spatial_avg_pool", format!("expected [.., C, H, W], got {s:?}")));
        }
        let area = s[s.len() - 2] * s[s.len() - 1];
        let planes = self.value(x).numel() / area;
        let src = self.data(x);
        let out: Vec<f64> = (0..planes)
            .map(|p| src[p * area..(p + 1) * area].iter().sum::<f64>() / area as f64)
            .collect();
        let value = Tensor::new(&s[..s.len() - 2], out)?;
        Ok(self.push(value, Op::AvgPool { x, planes, area }))
    }

    /// Multiplies every `H×W` plane of `u` (`[.., C, H, W]`) by the matching
    /// scalar of `gate` (`[.., C]`).
    pub fn channel_scale(&mut self, u: Var, gate: Var) -> Result<Var> {
        let su = self.shape(u).to_vec();
        let sg = self.shape(gate);
        if su.len() < 3 || sg != &su[..su.len() - 2] {
            return Err(Error::dim("channel_scale", format!("map {su:?} with gate {sg:?}")));
        }
        let area = su[su.len() - 2] * su[su.len() - 1];
        let g = self.data(gate);
        let src = self.data(u);
        let mut out = Vec::with_capacity(src.len());
        for (p, &gv) in g.iter().enumerate() {
            out.extend(src[p * area..(p + 1) * area].iter().map(|v| v * gv));
        }
        let value = Tensor::new(&su, out)?;
        Ok(self.push(value, Op::ChannelScale { u, gate, area }))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&tensors)?;
        let widths = tensors.iter().map(|t| *t.shape().last().unwrap()).collect();
        let rows = value.numel() / value.shape().last().copied().unwrap_or(1).max(1);
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), widths, rows }))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_last(start, len)?;
        let width = *self.shape(a).last().unwrap();
        let rows = value.numel() / len.max(1);
        Ok(self.push(value, Op::SliceLast { a, start, width, rows }))
    }

    /// L2-normalizes a vector, or each row of a matrix.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (rows, cols) = match s.as_slice() {
            &[c] => (1, c),
            &[r, c] => (r, c),
            _ => return Err(Error::dim("normalize_rows", format!("expected 1-D or 2-D, got {s:?}"))),
        };
        let src = self.data(a);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= DEGENERATE_NORM {
                return Err(Error::DegenerateVector { norm });
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::new(&s, out)?;
        Ok(self.push(value, Op::NormalizeRows { a, rows, cols, norms }))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_into = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: &mut dyn FnMut(&mut [f64])| {
            let len = self.value(v).numel();
            contrib(grads[v.0].get_or_insert_with(|| vec![0.0; len]));
        };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.data(a), self.data(b));
                add_into(grads, a, &mut |ga| {
                    // ga += g · bᵀ
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += dot(grow, brow);
                        }
                    }
                });
                add_into(grads, b, &mut |gb| {
                    // gb += aᵀ · g
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = av[i * k + p];
                            if s != 0.0 {
                                axpy(&mut gb[p * n..(p + 1) * n], s, grow);
                            }
                        }
                    }
                });
            }
            &Op::Transpose { a, rows, cols } => add_into(grads, a, &mut |ga| {
                for r in 0..rows {
                    for c in 0..cols {
                        ga[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            &Op::Add(a, b) => {
                add_into(grads, a, &mut |ga| axpy(ga, 1.0, g));
                add_into(grads, b, &mut |gb| axpy(gb, 1.0, g));
            }
            &Op::Sub(a, b) => {
                add_into(grads, a, &mut |ga| axpy(ga, 1.0, g));
                add_into(grads, b, &mut |gb| axpy(gb, -1.0, g));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.data(a), self.data(b));
                add_into(grads, a, &mut |ga| {
                    ga.iter_mut().zip(g).zip(bv).for_each(|((d, gi), y)| *d += gi * y)
                });
                add_into(grads, b, &mut |gb| {
                    gb.iter_mut().zip(g).zip(av).for_each(|((d, gi), x)| *d += gi * x)
                });
            }
            &Op::Scale(a, s) => add_into(grads, a, &mut |ga| axpy(ga, s, g)),
            &Op::Relu(a) => {
                let x = self.data(a);
                add_into(grads, a, &mut |ga| {
                    for ((d, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                })
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                add_into(grads, a, &mut |ga| {
                    ga.iter_mut().zip(g).zip(y).for_each(|((d, gi), yi)| *d += gi * yi * (1.0 - yi))
                })
            }
            &Op::Softplus(a) => {
                let x = self.data(a);
                add_into(grads, a, &mut |ga| {
                    ga.iter_mut().zip(g).zip(x).for_each(|((d, gi), xi)| *d += gi * sigmoid(*xi))
                })
            }
            &Op::Sum(a) => add_into(grads, a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            &Op::Reshape(a) => add_into(grads, a, &mut |ga| axpy(ga, 1.0, g)),
            &Op::GradReverse(a) => add_into(grads, a, &mut |ga| axpy(ga, -1.0, g)),
            Op::Conv2d { x, kernels, geom, cols } => {
                let kv = self.data(*kernels);
                add_into(grads, *x, &mut |gx| conv_backward(g, kv, cols, geom, Some(gx), None));
                add_into(grads, *kernels, &mut |gk| conv_backward(g, kv, cols, geom, None, Some(gk)));
            }
            &Op::AvgPool { x, planes, area } => add_into(grads, x, &mut |gx| {
                for p in 0..planes {
                    let share = g[p] / area as f64;
                    gx[p * area..(p + 1) * area].iter_mut().for_each(|d| *d += share);
                }
            }),
            &Op::ChannelScale { u, gate, area } => {
                let (uv, gv) = (self.data(u), self.data(gate));
                add_into(grads, u, &mut |gu| {
                    for (p, &s) in gv.iter().enumerate() {
                        axpy(&mut gu[p * area..(p + 1) * area], s, &g[p * area..(p + 1) * area]);
                    }
                });
                add_into(grads, gate, &mut |gg| {
                    for (p, d) in gg.iter_mut().enumerate() {
                        *d += dot(&g[p * area..(p + 1) * area], &uv[p * area..(p + 1) * area]);
                    }
                });
            }
            Op::Concat { parts, widths, rows } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    add_into(grads, p, &mut |gp| {
                        for r in 0..*rows {
                            axpy(&mut gp[r * w..(r + 1) * w], 1.0, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            &Op::SliceLast { a, start, width, rows } => {
                let len = g.len() / rows.max(1);
                add_into(grads, a, &mut |ga| {
                    for r in 0..rows {
                        axpy(&mut ga[r * width + start..r * width + start + len], 1.0, &g[r * len..(r + 1) * len]);
                    }
                })
            }
            Op::NormalizeRows { a, rows, cols, norms } => {
                let y = node.value.data();
                add_into(grads, *a, &mut |ga| {
                    for r in 0..*rows {
                        let span = r * cols..(r + 1) * cols;
                        let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                        let proj = dot(yr, gr);
                        for ((d, yi), gi) in ga[span].iter_mut().zip(yr).zip(gr) {
                            *d += (gi - yi * proj) / norms[r];
                        }
                    }
                })
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0; 4];
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s != 0.0 {
                axpy(orow, s, &b[p * n..(p + 1) * n]);
            }
        }
    }
    out
}

/// Unfolds `x` into `[C_in·9, N·OH·OW]`, one row per (channel, tap) pair;
/// taps that fall on the zero padding stay 0.
fn im2col(x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let mut cols = vec![0.0; geom.c_in * 9 * geom.batch * geom.oh * geom.ow];
    for_each_tap(geom, |row, col, src, lo, hi| {
        let stride = geom.stride;
        let dst = &mut cols[row + col..];
        for ox in lo..hi {
            dst[ox] = x[src + ox * stride - 1];
        }
    });
    cols
}

/// Adjoint of [`im2col`]: accumulates every column entry back onto its pixel.
fn col2im(cols: &[f64], gx: &mut [f64], geom: &ConvGeom) {
    for_each_tap(geom, |row, col, src, lo, hi| {
        let stride = geom.stride;
        let from = &cols[row + col..];
        for ox in lo..hi {
            gx[src + ox * stride - 1] += from[ox];
        }
    });
}

/// Calls `f(row_offset, col_offset, src_offset, lo, hi)` for every output row
/// of every (batch, channel, tap): output columns `lo..hi` of that row read
/// input element `src_offset + ox * stride - 1`.
fn for_each_tap(geom: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let ConvGeom { batch, c_in, h, w, stride, oh, ow, .. } = *geom;
    let (plane, np) = (oh * ow, batch * oh * ow);
    let ranges: [(usize, usize); 3] = std::array::from_fn(|kx| ConvGeom::valid_range(ow, w, stride, kx));
    for ci in 0..c_in {
        for ky in 0..3 {
            for (kx, &(lo, hi)) in ranges.iter().enumerate() {
                let row = (ci * 9 + ky * 3 + kx) * np;
                for b in 0..batch {
                    let base = (b * c_in + ci) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        // lo ≥ 1 when kx = 0, so the -1 never underflows.
                        let src = base + iy as usize * w + kx;
                        f(row, b * plane + oy * ow, src, lo, hi);
                    }
                }
            }
        }
    }
}

/// `[C_out, N·P]` ↔ `[N, C_out, P]`.
fn channel_major(y: &[f64], batch: usize, c: usize, plane: usize, to_batch_major: bool) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for b in 0..batch {
        for ch in 0..c {
            let bm = (b * c + ch) * plane;
            let cm = ch * batch * plane + b * plane;
            let (dst, src) = if to_batch_major { (bm, cm) } else { (cm, bm) };
            out[dst..dst + plane].copy_from_slice(&y[src..src + plane]);
        }
    }
    out
}

fn conv_forward(x: &[f64], k: &[f64], geom: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(x, geom);
    let np = geom.batch * geom.oh * geom.ow;
    let y = matmul_raw(k, &cols, geom.c_out, geom.c_in * 9, np);
    (channel_major(&y, geom.batch, geom.c_out, geom.oh * geom.ow, true), cols)
}

fn conv_backward(g: &[f64], k: &[f64], cols: &[f64], geom: &ConvGeom, gx: Option<&mut [f64]>, gk: Option<&mut [f64]>) {
    let np = geom.batch * geom.oh * geom.ow;
    let taps = geom.c_in * 9;
    let gy = channel_major(g, geom.batch, geom.c_out, geom.oh * geom.ow, false);
    if let Some(gk) = gk {
        for co in 0..geom.c_out {
            let grow = &gy[co * np..(co + 1) * np];
            for r in 0..taps {
                gk[co * taps + r] += dot(grow, &cols[r * np..(r + 1) * np]);
            }
        }
    }
    if let Some(gx) = gx {
        let mut gcols = vec![0.0; taps * np];
        for co in 0..geom.c_out {
            let grow = &gy[co * np..(co + 1) * np];
            for r in 0..taps {
                let s = k[co * taps + r];
                if s != 0.0 {
                    axpy(&mut gcols[r * np..(r + 1) * np], s, grow);
                }
            }
        }
        col2im(&gcols, gx, geom);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GRAD_TOL};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let i2 = g.leaf(Tensor::identity(2));
        let m = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = g.leaf(t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn matmul_gradient_is_row_sums_of_b() {
        let a = t(&[2, 3], &[0.3, -1.2, 0.7, 2.0, 0.1, -0.4]);
        let b = t(&[3, 2], &[1.0, 2.0, -0.5, 0.25, 3.0, -1.0]);
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(a.clone()), g.leaf(b.clone()));
        let p = g.matmul(va, vb).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        let row_sums: Vec<f64> = (0..3).map(|r| b.data()[r * 2] + b.data()[r * 2 + 1]).collect();
        let expected: Vec<f64> = (0..2).flat_map(|_| row_sums.iter().copied()).collect();
        assert_eq!(grads.get(va).unwrap(), expected.as_slice());

        let report = check_gradients(&[a, b], |g, v| {
            let p = g.matmul(v[0], v[1])?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn conv2d_zero_and_delta_kernels() {
        let x = t(&[1, 4, 4], &(0..16).map(|v| v as f64 * 0.5 - 3.0).collect::<Vec<_>>());
        let mut g = Graph::new();
        let vx = g.leaf(x.clone());
        let zero = g.leaf(Tensor::zeros(&[2, 1, 3, 3]));
        let y = g.conv2d(vx, zero, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
        delta.data_mut()[4] = 1.0;
        let vd = g.leaf(delta);
        let y = g.conv2d(vx, vd, 1).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn conv2d_stride_two_output_size_and_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(&[2, 3, 5, 7], 1.0));
        let k = g.leaf(Tensor::filled(&[4, 3, 3, 3], 1.0));
        let y = g.conv2d(x, k, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 3, 4]);
        // Top-left output sees a 2×2 window of ones per channel.
        assert_eq!(g.value(y).data()[0], 12.0);

        let bad = g.leaf(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(matches!(g.conv2d(x, bad, 1), Err(Error::Dimension { .. })));
        assert!(g.conv2d(x, k, 3).is_err());
    }

    #[test]
    fn conv2d_gradcheck() {
        let x: Vec<f64> = (0..32).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.13).collect();
        let k: Vec<f64> = (0..54).map(|i| ((i * 17 % 13) as f64 - 6.0) * 0.07).collect();
        let w: Vec<f64> = (0..48).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        for stride in [1, 2] {
            let weights = w.clone();
            let report = check_gradients(&[t(&[2, 4, 4], &x), t(&[3, 2, 3, 3], &k)], |g, v| {
                let y = g.conv2d(v[0], v[1], stride)?;
                let n = g.value(y).numel();
                let r = g.leaf(Tensor::new(g.shape(y), weights[..n].to_vec())?);
                let p = g.mul(y, r)?;
                Ok(g.sum(p))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "stride {stride}: {report:?}");
        }
    }

    #[test]
    fn elementwise_and_reductions() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::vector(&[0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);

        let c = g.leaf(Tensor::filled(&[3, 2, 2], 1.75));
        let p = g.spatial_avg_pool(c).unwrap();
        assert_eq!(g.value(p).data(), &[1.75; 3]);

        let big = g.leaf(Tensor::vector(&[800.0, -800.0]));
        let sp = g.softplus(big);
        assert_eq!(g.value(sp).data(), &[800.0, 0.0]);
    }

    #[test]
    fn relu_gradcheck_away_from_kink() {
        let report = check_gradients(&[Tensor::vector(&[-1.0, 2.0])], |g, v| {
            let r = g.relu(v[0]);
            let w = g.leaf(Tensor::vector(&[0.7, -1.3]));
            let p = g.mul(r, w)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_err < GRAD_TOL);
    }

    #[test]
    fn grad_reverse_forward_and_backward() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.5, -2.0, 0.25]));
        let y = g.grad_reverse(x);
        assert_eq!(g.value(y).data(), &[1.5, -2.0, 0.25]);
        let s = g.sum(y);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[-1.0; 3]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn normalize_rows_rejects_zero_rows() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        assert!(matches!(g.normalize_rows(x), Err(Error::DegenerateVector { .. })));
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0]));
        let unused = g.leaf(Tensor::vector(&[2.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zero(unused, 1), vec![0.0]);
    }
}
