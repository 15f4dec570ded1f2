//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends a node
//! holding its value, and [`Graph::backward`] walks the nodes in reverse,
//! accumulating gradients into every node that (transitively) depends on a
//! leaf created with `requires_grad = true`. Dropping the graph frees it.
//!
//! Elementwise binary ops broadcast with trailing-axis alignment: shapes are
//! right-aligned, missing leading axes count as 1, and an axis of extent 1
//! stretches to match the other operand.

use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stabiliser added to the variance inside layer normalisation.
pub const LN_EPS: f64 = 1e-5;
/// Stabiliser added to the squared norm inside L2 normalisation.
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Exp(Var),
    Tanh(Var),
    Gelu { x: Var, tanh: Vec<T> },
    Sqrt(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    BroadcastTo(Var),
    SumAll(Var),
    SumAxis(Var),
    Softmax(Var, usize),
    LayerNorm { x: Var, rstd: Vec<T> },
    L2Normalize { x: Var, axis: usize, norms: Vec<T> },
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, from: usize },
    Conv2d { x: Var, k: Var, geom: ConvGeom, cols: Vec<T> },
    Bilinear(Var),
    UpsampleNearest(Var, usize),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Disables the per-op NaN/Inf scan.
    pub fn without_finite_checks(mut self) -> Self {
        self.check_finite = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------------

    fn align(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            return Ok((a, b));
        }
        let target = broadcast_shape(&sa, &sb).map_err(|_| TensorError::Dimension {
            op,
            detail: format!("cannot broadcast {sa:?} with {sb:?}"),
        })?;
        let a = if sa == target { a } else { self.broadcast_to(a, &target)? };
        let b = if sb == target { b } else { self.broadcast_to(b, &target)? };
        Ok((a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: impl Fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (a, b) = self.align(name, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        self.push(name, value, mk(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push("add_scalar", value, Op::AddScalar(x), &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push("mul_scalar", value, Op::MulScalar(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -T::one())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.exp());
        self.push("exp", value, Op::Exp(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.tanh());
        self.push("tanh", value, Op::Tanh(x), &[x])
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        let tanh: Vec<T> = xs.data().iter().map(|&v| kernels::gelu_inner_tanh(v)).collect();
        let data = xs.data().iter().zip(&tanh).map(|(&v, &t)| kernels::gelu(v, t)).collect();
        let value = Tensor::new(xs.shape().to_vec(), data)?;
        let tanh = if self.requires_grad(x) { tanh } else { Vec::new() };
        self.push("gelu", value, Op::Gelu { x, tanh }, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.sqrt());
        self.push("sqrt", value, Op::Sqrt(x), &[x])
    }

    // ---- shape ----------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return dim_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            );
        }
        let value = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        match broadcast_shape(&src, shape) {
            Ok(s) if s == shape => {}
            _ => return dim_err("broadcast_to", format!("{src:?} -> {shape:?}")),
        }
        let data = kernels::broadcast_to(self.value(x).data(), &src, shape);
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push("broadcast_to", value, Op::BroadcastTo(x), &[x])
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return dim_err("transpose", format!("expected rank 2, got {s:?}"));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return dim_err("concat", "no inputs");
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return dim_err("concat", format!("axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return dim_err("concat", format!("{s:?} does not match {first:?} off axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("concat", value, Op::Concat(xs.to_vec(), axis), xs)
    }

    /// Half-open range `from..to` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, from: usize, to: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || from >= to || to > s[axis] {
            return dim_err("slice", format!("{from}..{to} on axis {axis} of {s:?}"));
        }
        let (outer, len, inner) = kernels::split_axis(&s, axis);
        let src = self.value(x).data();
        let width = (to - from) * inner;
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let start = (o * len + from) * inner;
            out.extend_from_slice(&src[start..start + width]);
        }
        let mut shape = s;
        shape[axis] = to - from;
        let value = Tensor::new(shape, out)?;
        self.push("slice", value, Op::Slice { x, axis, from }, &[x])
    }

    /// Rows of a 2-D table picked by index.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || rows.iter().any(|&r| r >= s[0]) {
            return dim_err("gather_rows", format!("rows {rows:?} from {s:?}"));
        }
        let c = s[1];
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&src[r * c..(r + 1) * c]);
        }
        let value = Tensor::new(vec![rows.len(), c], out)?;
        self.push("gather_rows", value, Op::GatherRows(table, rows.to_vec()), &[table])
    }

    // ---- reductions ------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::lit(self.value(x).numel() as f64);
        let s = self.sum(x)?;
        self.mul_scalar(s, T::one() / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return dim_err("sum_axis", format!("axis {axis} of {s:?}"));
        }
        let (outer, len, inner) = kernels::split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = s;
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        self.push("sum_axis", value, Op::SumAxis(x), &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| TensorError::Dimension {
                op: "mean_axis",
                detail: format!("axis {axis}"),
            })?;
        let s = self.sum_axis(x, axis)?;
        self.mul_scalar(s, T::one() / T::lit(len as f64))
    }

    /// Population variance along `axis`, keeping it with extent 1.
    pub fn var_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let m = self.mean_axis(x, axis)?;
        let d = self.sub(x, m)?;
        let d2 = self.square(d)?;
        self.mean_axis(d2, axis)
    }

    // ---- structured ops -----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::Matmul(a, b), &[a, b])
    }

    /// `x·w + b` for x: n×i, w: i×o, b: o.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return dim_err("softmax", format!("axis {axis} of {s:?}"));
        }
        let out = kernels::softmax_forward(self.value(x).data(), &s, axis);
        let value = Tensor::new(s, out)?;
        self.push("softmax", value, Op::Softmax(x, axis), &[x])
    }

    /// Zero-mean, unit-variance rows over the last axis (no affine terms).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap_or(&0);
        if c < 2 {
            return dim_err("layer_norm", format!("last axis must be >= 2, got {s:?}"));
        }
        let (out, rstd) = kernels::layer_norm_forward(self.value(x).data(), c, T::lit(LN_EPS));
        let value = Tensor::new(s, out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, rstd }, &[x])
    }

    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return dim_err("l2_normalize", format!("axis {axis} of {s:?}"));
        }
        let (out, norms) =
            kernels::l2_normalize_forward(self.value(x).data(), &s, axis, T::lit(L2_EPS));
        let value = Tensor::new(s, out)?;
        self.push("l2_normalize", value, Op::L2Normalize { x, axis, norms }, &[x])
    }

    /// Convolution of x: c_in×h×w with k: c_out×c_in×kh×kw (no bias).
    ///
    /// Output extents are `(h + 2·pad − kh) / stride + 1` with floor division.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] {
            return dim_err("conv2d", format!("input {sx:?}, kernel {sk:?}"));
        }
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return dim_err("conv2d", format!("kernel {kh}x{kw} must be odd, stride {stride} >= 1"));
        }
        let (h, w) = (sx[1], sx[2]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return dim_err("conv2d", format!("kernel {kh}x{kw} larger than padded {h}x{w}"));
        }
        let geom = ConvGeom {
            c_in: sx[0],
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let p = geom.oh * geom.ow;
        let ckk = geom.c_in * kh * kw;
        let cols = if geom.is_pointwise() {
            self.value(x).data().to_vec()
        } else {
            kernels::im2col(self.value(x).data(), &geom)
        };
        let mut out = vec![T::zero(); c_out * p];
        T::gemm(
            c_out,
            ckk,
            p,
            T::one(),
            self.value(k).data(),
            (ckk as isize, 1),
            &cols,
            (p as isize, 1),
            T::zero(),
            &mut out,
            (p as isize, 1),
        );
        let value = Tensor::new(vec![c_out, geom.oh, geom.ow], out)?;
        let keep = self.requires_grad(x) || self.requires_grad(k);
        let cols = if keep { cols } else { Vec::new() };
        self.push("conv2d", value, Op::Conv2d { x, k, geom, cols }, &[x, k])
    }

    /// Bilinear resize of c×h×w to c×oh×ow (align-corners false).
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || oh == 0 || ow == 0 {
            return dim_err("bilinear_resize", format!("{s:?} -> {oh}x{ow}"));
        }
        let out = kernels::bilinear_forward(self.value(x).data(), s[0], s[1], s[2], oh, ow);
        let value = Tensor::new(vec![s[0], oh, ow], out)?;
        self.push("bilinear_resize", value, Op::Bilinear(x), &[x])
    }

    /// Nearest-neighbour upsampling of c×h×w by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return dim_err("upsample_nearest", format!("{s:?} by {factor}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = src[(ch * h + y / factor) * w + xx / factor];
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        self.push("upsample_nearest", value, Op::UpsampleNearest(x, factor), &[x])
    }

    // ---- reverse pass -------------------------------------------------------------

    /// Reverse-mode accumulation from a scalar `loss`. Gradients add onto any
    /// already stored, so call [`Graph::zero_grad`] between independent passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(TensorError::Usage(
                "loss does not depend on any tensor that requires grad".into(),
            ));
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut pending)?;
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn accumulate(&self, pending: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut pending[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, pending: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        let like = |v: Var, data: Vec<T>| Tensor::new(self.shape(v).to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(pending, *a, g.clone());
                self.accumulate(pending, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(pending, *a, g.clone());
                self.accumulate(pending, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(pending, *a, g.zip_map(vb, |d, x| d * x)?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(pending, *b, g.zip_map(va, |d, x| d * x)?);
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(pending, *a, g.zip_map(vb, |d, x| d / x)?);
                }
                if self.requires_grad(*b) {
                    let data = gd
                        .iter()
                        .zip(va.data())
                        .zip(vb.data())
                        .map(|((&d, &x), &z)| -d * x / (z * z))
                        .collect();
                    self.accumulate(pending, *b, like(*b, data)?);
                }
            }
            Op::AddScalar(x) => self.accumulate(pending, *x, g.clone()),
            Op::MulScalar(x, c) => self.accumulate(pending, *x, g.scale(*c)),
            Op::Exp(x) => self.accumulate(pending, *x, g.zip_map(y, |d, e| d * e)?),
            Op::Tanh(x) => {
                self.accumulate(pending, *x, g.zip_map(y, |d, t| d * (T::one() - t * t))?)
            }
            Op::Gelu { x, tanh } => {
                let data = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .zip(tanh)
                    .map(|((&d, &v), &t)| d * kernels::gelu_grad(v, t))
                    .collect();
                self.accumulate(pending, *x, like(*x, data)?);
            }
            Op::Sqrt(x) => {
                let two = T::lit(2.0);
                self.accumulate(pending, *x, g.zip_map(y, |d, s| d / (two * s))?)
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gd,
                        (n as isize, 1),
                        self.value(*b).data(),
                        (1, n as isize),
                        T::zero(),
                        &mut da,
                        (k as isize, 1),
                    );
                    self.accumulate(pending, *a, like(*a, da)?);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*a).data(),
                        (1, k as isize),
                        gd,
                        (n as isize, 1),
                        T::zero(),
                        &mut db,
                        (n as isize, 1),
                    );
                    self.accumulate(pending, *b, like(*b, db)?);
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                let mut out = vec![T::zero(); r * c];
                for ii in 0..r {
                    for j in 0..c {
                        out[ii * c + j] = gd[j * r + ii];
                    }
                }
                self.accumulate(pending, *x, like(*x, out)?);
            }
            Op::Reshape(x) => self.accumulate(pending, *x, like(*x, gd.to_vec())?),
            Op::BroadcastTo(x) => {
                let data = kernels::reduce_to(gd, y.shape(), self.shape(*x));
                self.accumulate(pending, *x, like(*x, data)?);
            }
            Op::SumAll(x) => {
                let s = self.shape(*x).to_vec();
                self.accumulate(pending, *x, Tensor::full(s, gd[0]));
            }
            Op::SumAxis(x) => {
                let s = self.shape(*x).to_vec();
                let data = kernels::broadcast_to(gd, y.shape(), &s);
                self.accumulate(pending, *x, Tensor::new(s, data)?);
            }
            Op::Softmax(x, axis) => {
                let data = kernels::softmax_backward(y.data(), gd, y.shape(), *axis);
                self.accumulate(pending, *x, like(*x, data)?);
            }
            Op::LayerNorm { x, rstd } => {
                let c = *y.shape().last().unwrap();
                let data = kernels::layer_norm_backward(y.data(), rstd, gd, c);
                self.accumulate(pending, *x, like(*x, data)?);
            }
            Op::L2Normalize { x, axis, norms } => {
                let data = kernels::l2_normalize_backward(y.data(), norms, gd, y.shape(), *axis);
                self.accumulate(pending, *x, like(*x, data)?);
            }
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = kernels::split_axis(y.shape(), *axis);
                let total = y.shape()[*axis];
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            data.extend_from_slice(&gd[start..start + len * inner]);
                        }
                        self.accumulate(pending, v, like(v, data)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, from } => {
                let s = self.shape(*x).to_vec();
                let (outer, len, inner) = kernels::split_axis(&s, *axis);
                let width = y.shape()[*axis] * inner;
                let mut data = vec![T::zero(); s.iter().product()];
                for o in 0..outer {
                    let start = (o * len + from) * inner;
                    data[start..start + width].copy_from_slice(&gd[o * width..(o + 1) * width]);
                }
                self.accumulate(pending, *x, Tensor::new(s, data)?);
            }
            Op::Conv2d { x, k, geom, cols } => {
                let p = geom.oh * geom.ow;
                let ckk = geom.c_in * geom.kh * geom.kw;
                let c_out = self.shape(*k)[0];
                if self.requires_grad(*k) {
                    // dK = dOut · colsᵀ
                    let mut dk = vec![T::zero(); c_out * ckk];
                    T::gemm(
                        c_out,
                        p,
                        ckk,
                        T::one(),
                        gd,
                        (p as isize, 1),
                        cols,
                        (1, p as isize),
                        T::zero(),
                        &mut dk,
                        (ckk as isize, 1),
                    );
                    self.accumulate(pending, *k, like(*k, dk)?);
                }
                if self.requires_grad(*x) {
                    // dcols = Kᵀ · dOut
                    let mut dcols = vec![T::zero(); ckk * p];
                    T::gemm(
                        ckk,
                        c_out,
                        p,
                        T::one(),
                        self.value(*k).data(),
                        (1, ckk as isize),
                        gd,
                        (p as isize, 1),
                        T::zero(),
                        &mut dcols,
                        (p as isize, 1),
                    );
                    let dx = if geom.is_pointwise() {
                        dcols
                    } else {
                        kernels::col2im(&dcols, geom)
                    };
                    self.accumulate(pending, *x, like(*x, dx)?);
                }
            }
            Op::Bilinear(x) => {
                let s = self.shape(*x);
                let (oh, ow) = (y.shape()[1], y.shape()[2]);
                let data = kernels::bilinear_backward(gd, s[0], s[1], s[2], oh, ow);
                self.accumulate(pending, *x, like(*x, data)?);
            }
            Op::UpsampleNearest(x, factor) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h * factor, w * factor);
                let mut data = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            data[(ch * h + yy / factor) * w + xx / factor] +=
                                gd[(ch * oh + yy) * ow + xx];
                        }
                    }
                }
                self.accumulate(pending, *x, like(*x, data)?);
            }
            Op::GatherRows(table, rows) => {
                let s = self.shape(*table).to_vec();
                let c = s[1];
                let mut data = vec![T::zero(); s[0] * c];
                for (j, &r) in rows.iter().enumerate() {
                    for q in 0..c {
                        data[r * c + q] += gd[j * c + q];
                    }
                }
                self.accumulate(pending, *table, Tensor::new(s, data)?);
            }
        }
        Ok(())
    }
}
