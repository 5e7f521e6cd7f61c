//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value. [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar node with respect to every leaf that requires one.
//! Graphs are built per step and dropped afterwards; there is no support for
//! higher-order derivatives.

pub mod gradcheck;
pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use kernels::ConvGeom;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// One bilinear sampling tap set: plane offsets and weights of four neighbours.
pub(crate) type Taps<T> = [(u32, T); 4];

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    LeakyRelu { x: Var, slope: T },
    Sigmoid(Var),
    Exp(Var),
    Ln { x: Var, eps: T },
    Abs(Var),
    SumAxes { x: Var, reduced: Vec<bool> },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    TransposeLast2 { x: Var, rows: usize, cols: usize },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom, n: usize, cout: usize },
    ConvTranspose { x: Var, w: Var, b: Var, geom: ConvGeom, n: usize, cin: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Correlation { reference: Var, neighbor: Var, n: usize, c: usize, p: usize, q: usize },
    ExpShiftMax { x: Var, argmax: Vec<usize>, row: usize },
    RowNormalize { x: Var, row: usize },
    Warp { x: Var, taps: Vec<Taps<T>>, planes_per_sample: usize, plane: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to the leaves of a [`Graph`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// The recording tape for one forward/backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::shape(op, detail)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        let needs_grad = match &op {
            Op::Leaf => false,
            op => inputs(op).iter().any(|&v| self.needs(v)),
        };
        let op = if needs_grad || matches!(op, Op::Leaf) { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let v = self.value(x).map(|e| scale * e + shift);
        self.push(v, Op::Affine { x, scale }, "affine")
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Result<Var> {
        self.affine(x, scale, T::zero())
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        let v = self.value(x).map(|e| if e > T::zero() { e } else { slope * e });
        self.push(v, Op::LeakyRelu { x, slope }, "leaky_relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| T::one() / (T::one() + (-e).exp()));
        self.push(v, Op::Sigmoid(x), "sigmoid")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(T::exp);
        self.push(v, Op::Exp(x), "exp")
    }

    /// `ln(x + eps)`; non-positive arguments are a numerical error.
    pub fn ln(&mut self, x: Var, eps: T) -> Result<Var> {
        let v = self.value(x).map(|e| (e + eps).ln());
        self.push(v, Op::Ln { x, eps }, "ln")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(T::abs);
        self.push(v, Op::Abs(x), "abs")
    }

    /// Sums over `axes`, removing them from the shape (a full reduction
    /// yields shape `[1]`).
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(shape_err("sum_axes", format!("axis {a} for rank {}", shape.len())));
            }
            reduced[a] = true;
        }
        let out_shape: Vec<usize> =
            shape.iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let map = reduction_map(&shape, &reduced);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for (i, &v) in self.data(x).iter().enumerate() {
            out[map(i)] += v;
        }
        let v = Tensor::new(&out_shape, out)?;
        self.push(v, Op::SumAxes { x, reduced }, "sum_axes")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum_axes(x, &axes)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Mean over `axes`.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let count: usize = axes.iter().map(|&a| self.shape(x).get(a).copied().unwrap_or(1)).product();
        let s = self.sum_axes(x, axes)?;
        self.scale(s, T::one() / T::lit(count as f64))
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat", "no inputs".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(&shape, data)?;
        self.push(v, Op::Concat { inputs: parts.to_vec(), axis }, "concat")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("transpose_last2", format!("rank {}", shape.len())));
        }
        let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = shape[..shape.len() - 2].iter().product();
        let src = self.data(x);
        let mut data = Vec::with_capacity(src.len());
        for b in 0..batch {
            data.extend(kernels::transpose(&src[b * rows * cols..(b + 1) * rows * cols], rows, cols));
        }
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape.swap(r - 2, r - 1);
        let v = Tensor::new(&out_shape, data)?;
        self.push(v, Op::TransposeLast2 { x, rows, cols }, "transpose_last2")
    }

    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let r = sa.len();
        let (m, k, k2, n) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if k != k2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &self.data(a)[i * m * k..(i + 1) * m * k],
                false,
                &self.data(b)[i * k * n..(i + 1) * k * n],
                false,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = sa.clone();
        shape[r - 1] = n;
        let v = Tensor::new(&shape, out)?;
        self.push(v, Op::MatMul { a, b, batch, m, k, n }, "matmul")
    }

    /// 2-D convolution: `x: [n, cin, h, w]`, `w: [cout, cin, kh, kw]`, `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err("conv2d", format!("input {sx:?}, weight {sw:?}")));
        }
        if sw[2] % 2 == 0 || sw[3] % 2 == 0 {
            return Err(Error::InvalidArgument(format!("conv2d kernel {}x{} must be odd", sw[2], sw[3])));
        }
        let geom = ConvGeom::new(sx[1], [1, sx[2], sx[3]], [1, sw[2], sw[3]], [1, stride, stride], [0, padding, padding])?;
        let out = self.conv_nd(x, w, b, geom, sx[0], &sw)?;
        let [_, oh, ow] = geom.output;
        self.push(out.reshape(&[sx[0], sw[0], oh, ow])?, Op::Conv { x, w, b, geom, n: sx[0], cout: sw[0] }, "conv2d")
    }

    /// 3-D convolution: `x: [n, cin, t, h, w]`, `w: [cout, cin, kt, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: [usize; 3], padding: [usize; 3]) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 5 {
            return Err(shape_err("conv3d", format!("input {sx:?}, weight {sw:?}")));
        }
        let geom = ConvGeom::new(sx[1], [sx[2], sx[3], sx[4]], [sw[2], sw[3], sw[4]], stride, padding)?;
        let out = self.conv_nd(x, w, b, geom, sx[0], &sw)?;
        let [ot, oh, ow] = geom.output;
        self.push(out.reshape(&[sx[0], sw[0], ot, oh, ow])?, Op::Conv { x, w, b, geom, n: sx[0], cout: sw[0] }, "conv3d")
    }

    fn conv_nd(&self, x: Var, w: Var, b: Var, geom: ConvGeom, n: usize, sw: &[usize]) -> Result<Tensor<T>> {
        if sw[1] != geom.channels {
            return Err(shape_err("conv", format!("input has {} channels, weight expects {}", geom.channels, sw[1])));
        }
        if self.shape(b) != [sw[0]] {
            return Err(shape_err("conv", format!("bias {:?} for {} filters", self.shape(b), sw[0])));
        }
        let mut out = vec![T::zero(); n * sw[0] * geom.col_cols()];
        kernels::conv_forward(self.data(x), self.data(w), self.data(b), &geom, n, &mut out);
        Tensor::new(&[out.len()], out)
    }

    /// Transposed 2-D convolution: `x: [n, cin, h, w]`, `w: [cin, cout, kh, kw]`;
    /// output side `(h - 1) * stride - 2 * padding + kh`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || self.shape(b) != [sw[1]] {
            return Err(shape_err("conv_transpose2d", format!("input {sx:?}, weight {sw:?}, bias {:?}", self.shape(b))));
        }
        let (n, cin, cout) = (sx[0], sx[1], sw[1]);
        let oh = ((sx[2] - 1) * stride + sw[2]).checked_sub(2 * padding);
        let ow = ((sx[3] - 1) * stride + sw[3]).checked_sub(2 * padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(shape_err("conv_transpose2d", "padding exceeds output".into()));
        };
        // Adjoint geometry: a regular convolution from the output back to the input.
        let geom = ConvGeom::new(cout, [1, oh, ow], [1, sw[2], sw[3]], [1, stride, stride], [0, padding, padding])?;
        if geom.output != [1, sx[2], sx[3]] {
            return Err(shape_err("conv_transpose2d", format!("inconsistent geometry {geom:?}")));
        }
        let (k, p) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); k * p];
        let mut out = vec![T::zero(); n * geom.input_len()];
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        for s in 0..n {
            T::gemm(k, cin, p, T::one(), wd, true, &xd[s * cin * p..(s + 1) * cin * p], false, T::zero(), &mut cols);
            let os = &mut out[s * geom.input_len()..(s + 1) * geom.input_len()];
            for (c, plane) in os.chunks_mut(oh * ow).enumerate() {
                plane.fill(bd[c]);
            }
            kernels::col2im(&cols, &geom, os);
        }
        let v = Tensor::new(&[n, cout, oh, ow], out)?;
        self.push(v, Op::ConvTranspose { x, w, b, geom, n, cin }, "conv_transpose2d")
    }

    /// Max pooling over `[n, c, h, w]` with `kernel == stride`.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("max_pool2d", format!("input {s:?}")));
        }
        if kernel != stride || kernel == 0 {
            return Err(Error::InvalidArgument(format!("max_pool2d needs kernel == stride >= 1, got {kernel}/{stride}")));
        }
        if s[2] % stride != 0 || s[3] % stride != 0 {
            return Err(shape_err("max_pool2d", format!("{}x{} not divisible by {stride}", s[2], s[3])));
        }
        let (out, argmax) = kernels::max_pool(self.data(x), s[0] * s[1], s[2], s[3], kernel);
        let v = Tensor::new(&[s[0], s[1], s[2] / stride, s[3] / stride], out)?;
        self.push(v, Op::MaxPool { x, argmax }, "max_pool2d")
    }

    /// All-pairs channel dot products between `reference: [n, c, h, w]` and
    /// `neighbor: [n, c, hk, wk]`, shaped `[n, h*w, hk*wk]`.
    pub fn correlation(&mut self, reference: Var, neighbor: Var) -> Result<Var> {
        let (sr, sn) = (self.shape(reference).to_vec(), self.shape(neighbor).to_vec());
        if sr.len() != 4 || sn.len() != 4 || sr[0] != sn[0] || sr[1] != sn[1] {
            return Err(shape_err("correlation", format!("reference {sr:?}, neighbor {sn:?}")));
        }
        let (n, c, p, q) = (sr[0], sr[1], sr[2] * sr[3], sn[2] * sn[3]);
        let mut out = vec![T::zero(); n * p * q];
        for s in 0..n {
            kernels::correlation_tiled(
                &self.data(reference)[s * c * p..(s + 1) * c * p],
                &self.data(neighbor)[s * c * q..(s + 1) * c * q],
                c,
                p,
                q,
                &mut out[s * p * q..(s + 1) * p * q],
            );
        }
        let v = Tensor::new(&[n, p, q], out)?;
        self.push(v, Op::Correlation { reference, neighbor, n, c, p, q }, "correlation")
    }

    /// `exp(x - max)` along the last axis; the max is differentiated through.
    pub fn exp_shift_max(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let row = *shape.last().ok_or_else(|| shape_err("exp_shift_max", "rank 0".into()))?;
        let src = self.data(x);
        let mut out = Vec::with_capacity(src.len());
        let mut argmax = Vec::with_capacity(src.len() / row.max(1));
        for r in src.chunks(row) {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            let m = r[best];
            out.extend(r.iter().map(|&v| (v - m).exp()));
            argmax.push(best);
        }
        let v = Tensor::new(&shape, out)?;
        self.push(v, Op::ExpShiftMax { x, argmax, row }, "exp_shift_max")
    }

    /// Divides every last-axis row by its sum.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let row = *shape.last().ok_or_else(|| shape_err("row_normalize", "rank 0".into()))?;
        let mut out = Vec::with_capacity(self.value(x).numel());
        for r in self.data(x).chunks(row) {
            let s: T = r.iter().copied().sum();
            out.extend(r.iter().map(|&v| v / s));
        }
        let v = Tensor::new(&shape, out)?;
        self.push(v, Op::RowNormalize { x, row }, "row_normalize")
    }

    /// Gathers `x: [n, c, h, w]` through per-sample bilinear taps
    /// (`taps.len() == n * h * w`), shared by all channels of a sample.
    pub(crate) fn gather_bilinear(&mut self, x: Var, taps: Vec<Taps<T>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || taps.len() != s[0] * s[2] * s[3] {
            return Err(shape_err("warp", format!("input {s:?} with {} taps", taps.len())));
        }
        let plane = s[2] * s[3];
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for (pi, (dst, xs)) in out.chunks_mut(plane).zip(src.chunks(plane)).enumerate() {
            let sample = pi / s[1];
            let t = &taps[sample * plane..(sample + 1) * plane];
            for (o, tap) in dst.iter_mut().zip(t) {
                *o = tap.iter().fold(T::zero(), |acc, &(i, wgt)| acc + wgt * xs[i as usize]);
            }
        }
        let v = Tensor::new(&s, out)?;
        self.push(v, Op::Warp { x, taps, planes_per_sample: s[1], plane }, "warp")
    }

    /// Reverse pass from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(shape_err("backward", format!("output shape {:?} is not scalar", self.shape(output))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(output) {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.needs(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        if let Some(g) = self.slot(grads, v) {
            for (i, e) in g.iter_mut().enumerate() {
                *e += f(i);
            }
        }
    }

    fn propagate(&self, op: &Op<T>, y: &Tensor<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let yd = y.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |i| gy[i]);
                self.accumulate(grads, *b, |i| gy[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |i| gy[i]);
                self.accumulate(grads, *b, |i| -gy[i]);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |i| gy[i] * bd[i]);
                self.accumulate(grads, *b, |i| gy[i] * ad[i]);
            }
            Op::Affine { x, scale } => self.accumulate(grads, *x, |i| gy[i] * *scale),
            Op::LeakyRelu { x, slope } => {
                let xd = self.data(*x);
                self.accumulate(grads, *x, |i| if xd[i] > T::zero() { gy[i] } else { gy[i] * *slope });
            }
            Op::Sigmoid(x) => self.accumulate(grads, *x, |i| gy[i] * yd[i] * (T::one() - yd[i])),
            Op::Exp(x) => self.accumulate(grads, *x, |i| gy[i] * yd[i]),
            Op::Ln { x, eps } => {
                let xd = self.data(*x);
                self.accumulate(grads, *x, |i| gy[i] / (xd[i] + *eps));
            }
            Op::Abs(x) => {
                let xd = self.data(*x);
                self.accumulate(grads, *x, |i| {
                    if xd[i] > T::zero() {
                        gy[i]
                    } else if xd[i] < T::zero() {
                        -gy[i]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::SumAxes { x, reduced } => {
                let map = reduction_map(self.shape(*x), reduced);
                self.accumulate(grads, *x, |i| gy[map(i)]);
            }
            Op::Concat { inputs, axis } => {
                let base = self.shape(inputs[0]);
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total = y.shape()[*axis];
                let mut offset = 0;
                for &p in inputs {
                    let len = self.shape(p)[*axis] * inner;
                    self.accumulate(grads, p, |i| {
                        let (o, r) = (i / len, i % len);
                        gy[o * total * inner + offset + r]
                    });
                    offset += len;
                }
                debug_assert_eq!(outer * total * inner, gy.len());
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |i| gy[i]),
            Op::TransposeLast2 { x, rows, cols } => {
                let (r, c) = (*rows, *cols);
                self.accumulate(grads, *x, |i| {
                    let (b, rem) = (i / (r * c), i % (r * c));
                    gy[b * r * c + (rem % c) * r + rem / c]
                });
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..*batch {
                        T::gemm(m, n, k, T::one(), &gy[i * m * n..(i + 1) * m * n], false, &bd[i * k * n..(i + 1) * k * n], true, T::one(), &mut ga[i * m * k..(i + 1) * m * k]);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..*batch {
                        T::gemm(k, m, n, T::one(), &ad[i * m * k..(i + 1) * m * k], true, &gy[i * m * n..(i + 1) * m * n], false, T::one(), &mut gb[i * k * n..(i + 1) * k * n]);
                    }
                }
            }
            Op::Conv { x, w, b, geom, n, cout } => {
                let (xd, wd) = (self.data(*x), self.data(*w));
                let mut gx = self.needs(*x).then(|| vec![T::zero(); self.value(*x).numel()]);
                let mut gw = self.needs(*w).then(|| vec![T::zero(); self.value(*w).numel()]);
                let mut gb = self.needs(*b).then(|| vec![T::zero(); self.value(*b).numel()]);
                kernels::conv_backward(xd, wd, gy, geom, *n, *cout, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                for (v, g) in [(*x, gx), (*w, gw), (*b, gb)] {
                    if let Some(g) = g {
                        self.accumulate(grads, v, |i| g[i]);
                    }
                }
            }
            Op::ConvTranspose { x, w, b, geom, n, cin } => {
                let (xd, wd) = (self.data(*x), self.data(*w));
                let (k, p) = (geom.col_rows(), geom.col_cols());
                let mut cols = vec![T::zero(); k * p];
                let mut gx = self.needs(*x).then(|| vec![T::zero(); self.value(*x).numel()]);
                let mut gw = self.needs(*w).then(|| vec![T::zero(); self.value(*w).numel()]);
                let mut gb = self.needs(*b).then(|| vec![T::zero(); self.value(*b).numel()]);
                let plane = geom.input[1] * geom.input[2];
                for s in 0..*n {
                    let gys = &gy[s * geom.input_len()..(s + 1) * geom.input_len()];
                    if let Some(gb) = gb.as_deref_mut() {
                        for (c, pl) in gys.chunks(plane).enumerate() {
                            gb[c] += pl.iter().copied().sum::<T>();
                        }
                    }
                    if gx.is_none() && gw.is_none() {
                        continue;
                    }
                    kernels::im2col(gys, geom, &mut cols);
                    if let Some(gx) = gx.as_deref_mut() {
                        T::gemm(*cin, k, p, T::one(), wd, false, &cols, false, T::one(), &mut gx[s * cin * p..(s + 1) * cin * p]);
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        T::gemm(*cin, p, k, T::one(), &xd[s * cin * p..(s + 1) * cin * p], false, &cols, true, T::one(), gw);
                    }
                }
                for (v, g) in [(*x, gx), (*w, gw), (*b, gb)] {
                    if let Some(g) = g {
                        self.accumulate(grads, v, |i| g[i]);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (&src, &g) in argmax.iter().zip(gy) {
                        gx[src] += g;
                    }
                }
            }
            Op::Correlation { reference, neighbor, n, c, p, q } => {
                let (c, p, q) = (*c, *p, *q);
                let (rd, nd) = (self.data(*reference), self.data(*neighbor));
                if let Some(gr) = self.slot(grads, *reference) {
                    for s in 0..*n {
                        // d ref[c, p] = sum_q nbr[c, q] * g[p, q]
                        T::gemm(c, q, p, T::one(), &nd[s * c * q..(s + 1) * c * q], false, &gy[s * p * q..(s + 1) * p * q], true, T::one(), &mut gr[s * c * p..(s + 1) * c * p]);
                    }
                }
                if let Some(gn) = self.slot(grads, *neighbor) {
                    for s in 0..*n {
                        // d nbr[c, q] = sum_p ref[c, p] * g[p, q]
                        T::gemm(c, p, q, T::one(), &rd[s * c * p..(s + 1) * c * p], false, &gy[s * p * q..(s + 1) * p * q], false, T::one(), &mut gn[s * c * q..(s + 1) * c * q]);
                    }
                }
            }
            Op::ExpShiftMax { x, argmax, row } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, ((gxr, gyr), yr)) in gx.chunks_mut(*row).zip(gy.chunks(*row)).zip(yd.chunks(*row)).enumerate() {
                        let mut dot = T::zero();
                        for ((g, &gv), &yv) in gxr.iter_mut().zip(gyr).zip(yr) {
                            *g += gv * yv;
                            dot += gv * yv;
                        }
                        gxr[argmax[r]] -= dot;
                    }
                }
            }
            Op::RowNormalize { x, row } => {
                let xd = self.data(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((gxr, gyr), (yr, xr)) in gx.chunks_mut(*row).zip(gy.chunks(*row)).zip(yd.chunks(*row).zip(xd.chunks(*row))) {
                        let s: T = xr.iter().copied().sum();
                        let dot: T = gyr.iter().zip(yr).map(|(&g, &v)| g * v).sum();
                        for (g, &gv) in gxr.iter_mut().zip(gyr) {
                            *g += (gv - dot) / s;
                        }
                    }
                }
            }
            Op::Warp { x, taps, planes_per_sample, plane } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (pi, (gxs, gys)) in gx.chunks_mut(*plane).zip(gy.chunks(*plane)).enumerate() {
                        let sample = pi / planes_per_sample;
                        let t = &taps[sample * plane..(sample + 1) * plane];
                        for (tap, &g) in t.iter().zip(gys) {
                            for &(i, wgt) in tap {
                                gxs[i as usize] += wgt * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::Affine { x, .. }
        | Op::LeakyRelu { x, .. }
        | Op::Sigmoid(x)
        | Op::Exp(x)
        | Op::Ln { x, .. }
        | Op::Abs(x)
        | Op::SumAxes { x, .. }
        | Op::Reshape(x)
        | Op::TransposeLast2 { x, .. }
        | Op::MaxPool { x, .. }
        | Op::ExpShiftMax { x, .. }
        | Op::RowNormalize { x, .. }
        | Op::Warp { x, .. } => vec![*x],
        Op::Concat { inputs, .. } => inputs.clone(),
        Op::Conv { x, w, b, .. } | Op::ConvTranspose { x, w, b, .. } => vec![*x, *w, *b],
        Op::Correlation { reference, neighbor, .. } => vec![*reference, *neighbor],
    }
}

/// Maps a flat input index to the flat output index after summing out the
/// flagged axes.
fn reduction_map(shape: &[usize], reduced: &[bool]) -> impl Fn(usize) -> usize {
    // Output stride per input axis (0 for reduced axes).
    let mut out_strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        if !reduced[d] {
            out_strides[d] = acc;
            acc *= shape[d];
        }
    }
    let shape = shape.to_vec();
    move |mut i: usize| {
        let mut o = 0;
        for d in (0..shape.len()).rev() {
            let idx = i % shape[d];
            i /= shape[d];
            o += idx * out_strides[d];
        }
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn mul_self_accumulates_both_paths() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sum_axes_shapes() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let s = g.sum_axes(x, &[1]).unwrap();
        assert_eq!(g.shape(s), &[2, 4]);
        assert_eq!(g.value(s).get(&[1, 2]), (14 + 18 + 22) as f64);
        let all = g.sum(x).unwrap();
        assert_eq!(g.shape(all), &[1]);
    }

    #[test]
    fn concat_middle_axis() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[1000.0]));
        assert!(matches!(g.exp(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }
}
