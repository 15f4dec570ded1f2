//! Slice-level kernels shared by the tape's forward and backward passes.

use crate::scalar::Scalar;

/// Splits `shape` around `axis` into (outer, axis extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Per-axis source strides for reading a `src`-shaped buffer as `dst`-shaped,
/// with stride 0 on broadcast axes.
pub(crate) fn broadcast_strides(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let pad = dst.len() - src.len();
    let mut strides = vec![0; dst.len()];
    let mut acc = 1;
    for i in (0..dst.len()).rev() {
        let s = if i >= pad { src[i - pad] } else { 1 };
        strides[i] = if s == 1 { 0 } else { acc };
        acc *= s;
    }
    strides
}

/// Visits every destination index together with its broadcast source offset.
pub(crate) fn for_each_broadcast(
    dst: &[usize],
    strides: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let n: usize = dst.iter().product();
    if n == 0 {
        return;
    }
    let rank = dst.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for i in 0..n {
        f(i, off);
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < dst[ax] {
                break;
            }
            off -= strides[ax] * dst[ax];
            idx[ax] = 0;
        }
    }
}

/// Length of `src` when it is a trailing block repeated along the leading axes of `dst`.
fn trailing_block(src_shape: &[usize], dst: &[usize]) -> Option<usize> {
    let lead = src_shape.iter().take_while(|&&d| d == 1).count();
    let core = &src_shape[lead..];
    (dst.len() >= core.len() && dst.ends_with(core)).then(|| core.iter().product())
}

pub(crate) fn broadcast_to<T: Scalar>(src: &[T], src_shape: &[usize], dst: &[usize]) -> Vec<T> {
    let n: usize = dst.iter().product();
    if let Some(block) = trailing_block(src_shape, dst) {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            out.extend_from_slice(&src[..block]);
        }
        return out;
    }
    let strides = broadcast_strides(src_shape, dst);
    let mut out = vec![T::zero(); dst.iter().product()];
    for_each_broadcast(dst, &strides, |i, o| out[i] = src[o]);
    out
}

/// Sums a `dst`-shaped gradient back onto the `src` shape it was broadcast from.
pub(crate) fn reduce_to<T: Scalar>(grad: &[T], dst: &[usize], src_shape: &[usize]) -> Vec<T> {
    if let Some(block) = trailing_block(src_shape, dst) {
        let mut out = vec![T::zero(); block];
        for chunk in grad.chunks_exact(block) {
            for (o, &g) in out.iter_mut().zip(chunk) {
                *o += g;
            }
        }
        return out;
    }
    let strides = broadcast_strides(src_shape, dst);
    let mut out = vec![T::zero(); src_shape.iter().product()];
    for_each_broadcast(dst, &strides, |i, o| out[o] += grad[i]);
    out
}

pub(crate) fn softmax_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for a in 0..len {
                mx = mx.max(x[base + a * inner]);
            }
            let mut z = T::zero();
            for a in 0..len {
                let e = (x[base + a * inner] - mx).exp();
                out[base + a * inner] = e;
                z += e;
            }
            for a in 0..len {
                out[base + a * inner] /= z;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    shape: &[usize],
    axis: usize,
) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for a in 0..len {
                dot += y[base + a * inner] * dy[base + a * inner];
            }
            for a in 0..len {
                let k = base + a * inner;
                dx[k] = y[k] * (dy[k] - dot);
            }
        }
    }
    dx
}

/// Normalises each last-axis row; returns (output, reciprocal std per row).
pub(crate) fn layer_norm_forward<T: Scalar>(x: &[T], c: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let cn = T::lit(c as f64);
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() / cn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    (out, rstd)
}

pub(crate) fn layer_norm_backward<T: Scalar>(xhat: &[T], rstd: &[T], dy: &[T], c: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len()];
    let cn = T::lit(c as f64);
    for (r, &rs) in rstd.iter().enumerate() {
        let yh = &xhat[r * c..(r + 1) * c];
        let g = &dy[r * c..(r + 1) * c];
        let mean_g = g.iter().copied().sum::<T>() / cn;
        let mean_gy = g.iter().zip(yh).map(|(&a, &b)| a * b).sum::<T>() / cn;
        for k in 0..c {
            dx[r * c + k] = rs * (g[k] - mean_g - yh[k] * mean_gy);
        }
    }
    dx
}

/// Divides every vector along `axis` by sqrt(|v|^2 + eps); returns (output, norms).
pub(crate) fn l2_normalize_forward<T: Scalar>(
    x: &[T],
    shape: &[usize],
    axis: usize,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    let mut norms = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut ss = T::zero();
            for a in 0..len {
                let v = x[base + a * inner];
                ss += v * v;
            }
            let s = (ss + eps).sqrt();
            norms[o * inner + i] = s;
            for a in 0..len {
                out[base + a * inner] = x[base + a * inner] / s;
            }
        }
    }
    (out, norms)
}

pub(crate) fn l2_normalize_backward<T: Scalar>(
    y: &[T],
    norms: &[T],
    dy: &[T],
    shape: &[usize],
    axis: usize,
) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let s = norms[o * inner + i];
            let mut dot = T::zero();
            for a in 0..len {
                dot += y[base + a * inner] * dy[base + a * inner];
            }
            for a in 0..len {
                let k = base + a * inner;
                dx[k] = (dy[k] - y[k] * dot) / s;
            }
        }
    }
    dx
}

const GELU_K0: f64 = 0.797_884_560_802_865_4;
const GELU_K1: f64 = 0.044_715;

/// GELU, tanh approximation.
pub(crate) fn gelu<T: Scalar>(x: T, t: T) -> T {
    T::lit(0.5) * x * (T::one() + t)
}

/// Inner `tanh` of the approximation, kept by the forward pass for the backward one.
pub(crate) fn gelu_inner_tanh<T: Scalar>(x: T) -> T {
    (T::lit(GELU_K0) * (x + T::lit(GELU_K1) * x * x * x)).tanh()
}

/// Derivative given `x` and its [`gelu_inner_tanh`].
pub(crate) fn gelu_grad<T: Scalar>(x: T, t: T) -> T {
    let half = T::lit(0.5);
    let du = T::lit(GELU_K0) * (T::one() + T::lit(3.0 * GELU_K1) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `x` (c×h×w) into a (c·kh·kw) × (oh·ow) patch matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.oh * g.ow;
    let mut cols = vec![T::zero(); g.c_in * g.kh * g.kw * p];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &x[(c * g.h + iy as usize) * g.w..];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto c×h×w.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.oh * g.ow;
    let mut dx = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Source taps for one output coordinate under the align-corners-false rule.
pub(crate) fn bilinear_taps(out_i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((out_i as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = (src - i0 as f64).clamp(0.0, 1.0);
    (i0, i1, frac)
}

pub(crate) fn bilinear_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ys: Vec<_> = (0..oh).map(|y| bilinear_taps(y, h, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|x| bilinear_taps(x, w, ow)).collect();
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::lit(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                out[(ch * oh + oy) * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Scalar>(
    dy: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ys: Vec<_> = (0..oh).map(|y| bilinear_taps(y, h, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|x| bilinear_taps(x, w, ow)).collect();
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::lit(fx);
                let g = dy[(ch * oh + oy) * ow + ox];
                dst[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                dst[y0 * w + x1] += g * (T::one() - fy) * fx;
                dst[y1 * w + x0] += g * fy * (T::one() - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}
