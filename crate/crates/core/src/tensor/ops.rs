//! Differentiable operations over NCHW tensors.
//!
//! Piecewise operations use fixed conventions: relu has subgradient 0 at
//! the origin and max reductions route the gradient to the first maximal
//! element in row-major scan order.

use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::{numel, trace_branch, Element, Tensor};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

pub(crate) fn dims4<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(op, format!("expected a 4-d NCHW tensor, got {s:?}"))),
    }
}

fn dims2<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [a, b] => Ok((a, b)),
        ref s => Err(Error::shape(op, format!("expected a 2-d tensor, got {s:?}"))),
    }
}

/// Output extent of a sliding window along one axis.
pub fn window_out(extent: usize, window: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || window == 0 || window > extent + 2 * padding {
        return None;
    }
    Some((extent + 2 * padding - window) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn columns(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Source coordinate for output position `o` and kernel offset `k`,
    /// or `None` inside the zero padding.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Gathers every receptive field into a `[C·kh·kw, N·Ho·Wo]` matrix.
fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.columns();
    let hw_out = g.ho * g.wo;
    let mut out = vec![T::zero(); g.patch() * cols];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for ni in 0..g.n {
                    let plane = &x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.ho {
                        let Some(ih) = g.src(oh, ki, g.h) else { continue };
                        let dst = &mut dst_row[ni * hw_out + oh * g.wo..][..g.wo];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            if let Some(iw) = g.src(ow, kj, g.w) {
                                *d = plane[ih * g.w + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-adds a column matrix back onto the input layout.
fn col2im<T: Element>(cols_mat: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.columns();
    let hw_out = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &cols_mat[row * cols..(row + 1) * cols];
                for ni in 0..g.n {
                    let plane = &mut out[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.ho {
                        let Some(ih) = g.src(oh, ki, g.h) else { continue };
                        let src = &src_row[ni * hw_out + oh * g.wo..][..g.wo];
                        for (ow, &s) in src.iter().enumerate() {
                            if let Some(iw) = g.src(ow, kj, g.w) {
                                let p = &mut plane[ih * g.w + iw];
                                *p = *p + s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Swaps the two outer axes of an `[a, b, inner]` buffer.
fn swap_outer<T: Copy>(src: &[T], a: usize, b: usize, inner: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for j in 0..b {
        for i in 0..a {
            out.extend_from_slice(&src[(i * b + j) * inner..][..inner]);
        }
    }
    out
}

/// 2-d cross-correlation with zero padding, lowered to a matrix product
/// over gathered patches.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4("conv2d", input)?;
    let (o, kc, kh, kw) = dims4("conv2d", kernel)?;
    if kc != c {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel {:?} expects {kc} input channels but input {:?} has {c}",
                kernel.shape(),
                input.shape()
            ),
        ));
    }
    let (Some(ho), Some(wo)) = (
        window_out(h, kh, stride, padding),
        window_out(w, kw, stride, padding),
    ) else {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel {:?} with stride {stride} and padding {padding} does not fit input {:?}",
                kernel.shape(),
                input.shape()
            ),
        ));
    };
    let g = ConvGeom { n, c, h, w, kh, kw, stride, pad: padding, ho, wo };
    let patch = g.patch();
    let ncols = g.columns();
    let cols = im2col(&input.data(), &g);
    let mut out_mat = vec![T::zero(); o * ncols];
    T::gemm(o, patch, ncols, &kernel.data(), (patch, 1), &cols, (ncols, 1), T::zero(), &mut out_mat, (ncols, 1));
    let out = swap_outer(&out_mat, o, n, ho * wo);

    let k = kernel.clone();
    Ok(Tensor::from_op(
        out,
        vec![n, o, ho, wo],
        "conv2d",
        vec![input.clone(), kernel.clone()],
        move |grad, needs| {
            let gmat = swap_outer(grad, g.n, o, g.ho * g.wo);
            let d_input = needs[0].then(|| {
                let mut dcols = vec![T::zero(); patch * ncols];
                T::gemm(patch, o, ncols, &k.data(), (1, patch), &gmat, (ncols, 1), T::zero(), &mut dcols, (ncols, 1));
                col2im(&dcols, &g)
            });
            let d_kernel = needs[1].then(|| {
                let mut dk = vec![T::zero(); o * patch];
                T::gemm(o, ncols, patch, &gmat, (ncols, 1), &cols, (1, ncols), T::zero(), &mut dk, (patch, 1));
                dk
            });
            vec![d_input, d_kernel]
        },
    ))
}

/// Adds a per-channel bias to an `[N, C, ...]` tensor.
pub fn add_channel_bias<T: Element>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    if shape.len() < 2 || bias.shape() != [shape[1]] {
        return Err(Error::shape(
            "add_channel_bias",
            format!("bias {:?} does not match channels of {:?}", bias.shape(), shape),
        ));
    }
    let (n, c) = (shape[0], shape[1]);
    let inner = numel(&shape[2..]);
    let mut out = x.to_vec();
    {
        let b = bias.data();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bc = b[i % c];
            chunk.iter_mut().for_each(|v| *v = *v + bc);
        }
    }
    Ok(Tensor::from_op(out, shape, "add_channel_bias", vec![x.clone(), bias.clone()], move |g, needs| {
        let db = needs[1].then(|| {
            let mut db = vec![T::zero(); c];
            for (i, chunk) in g.chunks(inner).enumerate().take(n * c) {
                db[i % c] = db[i % c] + chunk.iter().copied().sum::<T>();
            }
            db
        });
        vec![needs[0].then(|| g.to_vec()), db]
    }))
}

/// Spatial mean or maximum per (sample, channel): `[N,C,H,W] -> [N,C,1,1]`.
pub fn pool_global<T: Element>(input: &Tensor<T>, mode: PoolMode) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4("pool_global", input)?;
    let hw = h * w;
    let data = input.data();
    let planes = data.chunks(hw);
    match mode {
        PoolMode::Avg => {
            let denom = T::from_usize(hw).unwrap();
            let out: Vec<T> = planes.map(|p| p.iter().copied().sum::<T>() / denom).collect();
            Ok(Tensor::from_op(out, vec![n, c, 1, 1], "pool_global_avg", vec![input.clone()], move |g, _| {
                let mut dx = Vec::with_capacity(n * c * hw);
                for &gv in g {
                    dx.extend(std::iter::repeat_n(gv / denom, hw));
                }
                vec![Some(dx)]
            }))
        }
        PoolMode::Max => {
            let arg: Vec<usize> = planes.map(first_argmax).collect();
            trace_branch(|h| arg.hash(h));
            let out: Vec<T> = arg.iter().enumerate().map(|(i, &a)| data[i * hw + a]).collect();
            Ok(Tensor::from_op(out, vec![n, c, 1, 1], "pool_global_max", vec![input.clone()], move |g, _| {
                let mut dx = vec![T::zero(); n * c * hw];
                for (i, (&gv, &a)) in g.iter().zip(&arg).enumerate() {
                    dx[i * hw + a] = gv;
                }
                vec![Some(dx)]
            }))
        }
    }
}

fn first_argmax<T: Element>(vals: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in vals.iter().enumerate().skip(1) {
        if v > vals[best] {
            best = i;
        }
    }
    best
}

/// Mean or maximum across channels: `[N,C,H,W] -> [N,1,H,W]`.
pub fn pool_channel<T: Element>(input: &Tensor<T>, mode: PoolMode) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4("pool_channel", input)?;
    let hw = h * w;
    let data = input.data();
    match mode {
        PoolMode::Avg => {
            let denom = T::from_usize(c).unwrap();
            let mut out = vec![T::zero(); n * hw];
            for ni in 0..n {
                let o = &mut out[ni * hw..][..hw];
                for ci in 0..c {
                    let plane = &data[(ni * c + ci) * hw..][..hw];
                    o.iter_mut().zip(plane).for_each(|(a, &b)| *a = *a + b);
                }
                o.iter_mut().for_each(|v| *v = *v / denom);
            }
            Ok(Tensor::from_op(out, vec![n, 1, h, w], "pool_channel_avg", vec![input.clone()], move |g, _| {
                let mut dx = Vec::with_capacity(n * c * hw);
                for ni in 0..n {
                    let gp = &g[ni * hw..][..hw];
                    for _ in 0..c {
                        dx.extend(gp.iter().map(|&v| v / denom));
                    }
                }
                vec![Some(dx)]
            }))
        }
        PoolMode::Max => {
            let mut arg = vec![0usize; n * hw];
            let mut out = vec![T::zero(); n * hw];
            for ni in 0..n {
                for p in 0..hw {
                    let mut best = 0;
                    let mut best_v = data[ni * c * hw + p];
                    for ci in 1..c {
                        let v = data[(ni * c + ci) * hw + p];
                        if v > best_v {
                            best = ci;
                            best_v = v;
                        }
                    }
                    arg[ni * hw + p] = best;
                    out[ni * hw + p] = best_v;
                }
            }
            trace_branch(|h| arg.hash(h));
            Ok(Tensor::from_op(out, vec![n, 1, h, w], "pool_channel_max", vec![input.clone()], move |g, _| {
                let mut dx = vec![T::zero(); n * c * hw];
                for ni in 0..n {
                    for p in 0..hw {
                        dx[(ni * c + arg[ni * hw + p]) * hw + p] = g[ni * hw + p];
                    }
                }
                vec![Some(dx)]
            }))
        }
    }
}

fn pool_geom(op: &'static str, h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    match (window_out(h, window, stride, 0), window_out(w, window, stride, 0)) {
        (Some(ho), Some(wo)) => Ok((ho, wo)),
        _ => Err(Error::shape(
            op,
            format!("window {window} stride {stride} does not fit spatial extent {h}x{w}"),
        )),
    }
}

/// Windowed spatial maximum without padding.
pub fn max_pool2d<T: Element>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4("max_pool2d", input)?;
    let (ho, wo) = pool_geom("max_pool2d", h, w, window, stride)?;
    let data = input.data();
    let planes = n * c;
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let plane = &data[pl * h * w..][..h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = (oh * stride) * w + ow * stride;
                for i in 0..window {
                    for j in 0..window {
                        let idx = (oh * stride + i) * w + ow * stride + j;
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                }
                out.push(plane[best]);
                arg.push(pl * h * w + best);
            }
        }
    }
    trace_branch(|hs| arg.hash(hs));
    let len = data.len();
    Ok(Tensor::from_op(out, vec![n, c, ho, wo], "max_pool2d", vec![input.clone()], move |g, _| {
        let mut dx = vec![T::zero(); len];
        for (&gv, &a) in g.iter().zip(&arg) {
            dx[a] = dx[a] + gv;
        }
        vec![Some(dx)]
    }))
}

/// Windowed spatial mean without padding.
pub fn avg_pool2d<T: Element>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4("avg_pool2d", input)?;
    let (ho, wo) = pool_geom("avg_pool2d", h, w, window, stride)?;
    let denom = T::from_usize(window * window).unwrap();
    let data = input.data();
    let planes = n * c;
    let mut out = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let plane = &data[pl * h * w..][..h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut s = T::zero();
                for i in 0..window {
                    for j in 0..window {
                        s = s + plane[(oh * stride + i) * w + ow * stride + j];
                    }
                }
                out.push(s / denom);
            }
        }
    }
    Ok(Tensor::from_op(out, vec![n, c, ho, wo], "avg_pool2d", vec![input.clone()], move |g, _| {
        let mut dx = vec![T::zero(); planes * h * w];
        for pl in 0..planes {
            let plane = &mut dx[pl * h * w..][..h * w];
            for oh in 0..ho {
                for ow in 0..wo {
                    let gv = g[(pl * ho + oh) * wo + ow] / denom;
                    for i in 0..window {
                        for j in 0..window {
                            let p = &mut plane[(oh * stride + i) * w + ow * stride + j];
                            *p = *p + gv;
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }))
}

/// Affine map `input · weight + bias` with `weight` laid out `[D, M]`.
pub fn linear<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = dims2("linear", input)?;
    let (wd, m) = dims2("linear", weight)?;
    if wd != d || bias.shape() != [m] {
        return Err(Error::shape(
            "linear",
            format!(
                "input {:?}, weight {:?} and bias {:?} are incompatible",
                input.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out: Vec<T> = bias.data().iter().copied().cycle().take(n * m).collect();
    T::gemm(n, d, m, &input.data(), (d, 1), &weight.data(), (m, 1), T::one(), &mut out, (m, 1));
    let (x, wt) = (input.clone(), weight.clone());
    Ok(Tensor::from_op(
        out,
        vec![n, m],
        "linear",
        vec![input.clone(), weight.clone(), bias.clone()],
        move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); n * d];
                T::gemm(n, m, d, g, (m, 1), &wt.data(), (1, m), T::zero(), &mut dx, (d, 1));
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![T::zero(); d * m];
                T::gemm(d, n, m, &x.data(), (1, d), g, (m, 1), T::zero(), &mut dw, (m, 1));
                dw
            });
            let db = needs[2].then(|| {
                let mut db = vec![T::zero(); m];
                for row in g.chunks(m) {
                    db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                }
                db
            });
            vec![dx, dw, db]
        },
    ))
}

/// `input · weightᵀ` with `weight` laid out `[M, D]` (output-major), no bias.
pub fn matmul_nt<T: Element>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = dims2("matmul_nt", input)?;
    let (m, wd) = dims2("matmul_nt", weight)?;
    if wd != d {
        return Err(Error::shape(
            "matmul_nt",
            format!("input {:?} and weight {:?} are incompatible", input.shape(), weight.shape()),
        ));
    }
    let mut out = vec![T::zero(); n * m];
    T::gemm(n, d, m, &input.data(), (d, 1), &weight.data(), (1, d), T::zero(), &mut out, (m, 1));
    let (x, wt) = (input.clone(), weight.clone());
    Ok(Tensor::from_op(out, vec![n, m], "matmul_nt", vec![input.clone(), weight.clone()], move |g, needs| {
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); n * d];
            T::gemm(n, m, d, g, (m, 1), &wt.data(), (d, 1), T::zero(), &mut dx, (d, 1));
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); m * d];
            T::gemm(m, n, d, g, (1, m), &x.data(), (d, 1), T::zero(), &mut dw, (d, 1));
            dw
        });
        vec![dx, dw]
    }))
}

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data();
    let mask: Vec<bool> = data.iter().map(|&v| v > T::zero()).collect();
    trace_branch(|h| mask.hash(h));
    let out = data.iter().zip(&mask).map(|(&v, &m)| if m { v } else { T::zero() }).collect();
    Tensor::from_op(out, input.shape().to_vec(), "relu", vec![input.clone()], move |g, _| {
        vec![Some(g.iter().zip(&mask).map(|(&gv, &m)| if m { gv } else { T::zero() }).collect())]
    })
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let out: Vec<T> = input.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let saved = out.clone();
    Tensor::from_op(out, input.shape().to_vec(), "sigmoid", vec![input.clone()], move |g, _| {
        vec![Some(g.iter().zip(&saved).map(|(&gv, &s)| gv * s * (T::one() - s)).collect())]
    })
}

/// Row-major strides of `shape`, with zero stride on broadcast (size-1)
/// axes of `small` relative to `big`.
fn broadcast_strides(big: &[usize], small: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; small.len()];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        strides[i] = if small[i] == 1 && big[i] != 1 { 0 } else { acc };
        acc *= small[i];
    }
    strides
}

fn broadcast_index_map(big: &[usize], small: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(big, small);
    let total = numel(big);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; big.len()];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for ax in (0..big.len()).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < big[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Elementwise product where `other` is broadcast along its size-1 axes.
pub fn mul_broadcast<T: Element>(input: &Tensor<T>, other: &Tensor<T>) -> Result<Tensor<T>> {
    let big = input.shape().to_vec();
    let small = other.shape();
    let ok = small.len() == big.len() && small.iter().zip(&big).all(|(&s, &b)| s == b || s == 1);
    if !ok {
        return Err(Error::shape(
            "mul_broadcast",
            format!("{small:?} does not broadcast to {big:?}"),
        ));
    }
    let map = broadcast_index_map(&big, small);
    let small_len = other.numel();
    let out: Vec<T> = {
        let (a, b) = (input.data(), other.data());
        a.iter().zip(&map).map(|(&x, &j)| x * b[j]).collect()
    };
    let (a_t, b_t) = (input.clone(), other.clone());
    Ok(Tensor::from_op(out, big, "mul_broadcast", vec![input.clone(), other.clone()], move |g, needs| {
        let da = needs[0].then(|| {
            let b = b_t.data();
            g.iter().zip(&map).map(|(&gv, &j)| gv * b[j]).collect()
        });
        let db = needs[1].then(|| {
            let a = a_t.data();
            let mut db = vec![T::zero(); small_len];
            for ((&gv, &j), &av) in g.iter().zip(&map).zip(a.iter()) {
                db[j] = db[j] + gv * av;
            }
            db
        });
        vec![da, db]
    }))
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let out = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_op(out, a.shape().to_vec(), "add", vec![a.clone(), b.clone()], |g, needs| {
        vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
    }))
}

pub fn scale<T: Element>(x: &Tensor<T>, factor: T) -> Tensor<T> {
    let out = x.data().iter().map(|&v| v * factor).collect();
    Tensor::from_op(out, x.shape().to_vec(), "scale", vec![x.clone()], move |g, _| {
        vec![Some(g.iter().map(|&v| v * factor).collect())]
    })
}

pub fn sum<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.data().iter().copied().sum::<T>();
    let len = x.numel();
    Tensor::from_op(vec![s], vec![1], "sum", vec![x.clone()], move |g, _| vec![Some(vec![g[0]; len])])
}

pub fn mean<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let len = x.numel();
    scale(&sum(x), T::one() / T::from_usize(len).unwrap())
}

pub fn reshape<T: Element>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if numel(shape) != x.numel() || shape.contains(&0) {
        return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", x.shape())));
    }
    Ok(Tensor::from_op(x.to_vec(), shape.to_vec(), "reshape", vec![x.clone()], |g, _| {
        vec![Some(g.to_vec())]
    }))
}

/// Concatenates NCHW tensors along the channel axis in argument order.
pub fn concat_channels<T: Element>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let (n, _, h, w) = dims4("concat_channels", first)?;
    let mut chans = Vec::with_capacity(parts.len());
    for p in parts {
        let (pn, pc, ph, pw) = dims4("concat_channels", p)?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} does not match {:?} outside the channel axis", p.shape(), first.shape()),
            ));
        }
        chans.push(pc);
    }
    let total: usize = chans.iter().sum();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total * hw);
    for ni in 0..n {
        for (p, &pc) in parts.iter().zip(&chans) {
            out.extend_from_slice(&p.data()[ni * pc * hw..][..pc * hw]);
        }
    }
    Ok(Tensor::from_op(out, vec![n, total, h, w], "concat_channels", parts.to_vec(), move |g, needs| {
        let mut offsets = Vec::with_capacity(chans.len());
        let mut acc = 0;
        for &pc in &chans {
            offsets.push(acc);
            acc += pc;
        }
        chans
            .iter()
            .zip(&offsets)
            .zip(needs)
            .map(|((&pc, &off), &need)| {
                need.then(|| {
                    let mut d = Vec::with_capacity(n * pc * hw);
                    for ni in 0..n {
                        d.extend_from_slice(&g[(ni * total + off) * hw..][..pc * hw]);
                    }
                    d
                })
            })
            .collect()
    }))
}

/// Channels `start..start + len` of an NCHW tensor.
pub fn narrow_channels<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4("narrow_channels", x)?;
    if len == 0 || start + len > c {
        return Err(Error::shape(
            "narrow_channels",
            format!("channels {start}..{} out of range for {:?}", start + len, x.shape()),
        ));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * len * hw);
    {
        let d = x.data();
        for ni in 0..n {
            out.extend_from_slice(&d[(ni * c + start) * hw..][..len * hw]);
        }
    }
    Ok(Tensor::from_op(out, vec![n, len, h, w], "narrow_channels", vec![x.clone()], move |g, _| {
        let mut dx = vec![T::zero(); n * c * hw];
        for ni in 0..n {
            dx[(ni * c + start) * hw..][..len * hw].copy_from_slice(&g[ni * len * hw..][..len * hw]);
        }
        vec![Some(dx)]
    }))
}

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Per-channel normalization. Train mode normalizes with batch statistics
/// (biased variance) and folds them into `stats` by exponential moving
/// average (unbiased variance); eval mode uses `stats` as given.
pub fn batch_norm<T: Element>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: NormMode,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4("batch_norm", input)?;
    if scale.shape() != [c] || shift.shape() != [c] || stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::shape(
            "batch_norm",
            format!(
                "scale {:?} / shift {:?} / stats {} do not match {c} channels",
                scale.shape(),
                shift.shape(),
                stats.mean.len()
            ),
        ));
    }
    let hw = h * w;
    let count = n * hw;
    if mode == NormMode::Train && count < 2 {
        return Err(Error::invalid(
            "batch_norm",
            format!("train mode needs at least 2 values per channel, got {count}"),
        ));
    }
    let eps = T::from_f64(BN_EPSILON).unwrap();
    let momentum = T::from_f64(BN_MOMENTUM).unwrap();
    let m_t = T::from_usize(count).unwrap();
    let x = input.data();

    let (mu, inv_std): (Vec<T>, Vec<T>) = match mode {
        NormMode::Train => {
            let mut mu = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let mut s = T::zero();
                for ni in 0..n {
                    s = s + x[(ni * c + ci) * hw..][..hw].iter().copied().sum::<T>();
                }
                mu[ci] = s / m_t;
                let mut v = T::zero();
                for ni in 0..n {
                    for &xv in &x[(ni * c + ci) * hw..][..hw] {
                        let d = xv - mu[ci];
                        v = v + d * d;
                    }
                }
                var[ci] = v / m_t;
            }
            let unbias = m_t / T::from_usize(count - 1).unwrap();
            for ci in 0..c {
                stats.mean[ci] = (T::one() - momentum) * stats.mean[ci] + momentum * mu[ci];
                stats.var[ci] = (T::one() - momentum) * stats.var[ci] + momentum * var[ci] * unbias;
            }
            let inv = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mu, inv)
        }
        NormMode::Eval => (
            stats.mean.clone(),
            stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
        ),
    };

    let gamma = scale.to_vec();
    let beta = shift.to_vec();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                xhat[i] = (x[i] - mu[ci]) * inv_std[ci];
                out[i] = gamma[ci] * xhat[i] + beta[ci];
            }
        }
    }
    drop(x);

    Ok(Tensor::from_op(
        out,
        vec![n, c, h, w],
        "batch_norm",
        vec![input.clone(), scale.clone(), shift.clone()],
        move |g, needs| {
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for i in base..base + hw {
                        dbeta[ci] = dbeta[ci] + g[i];
                        dgamma[ci] = dgamma[ci] + g[i] * xhat[i];
                    }
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); g.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in base..base + hw {
                            dx[i] = match mode {
                                NormMode::Train => {
                                    gamma[ci] * inv_std[ci] / m_t
                                        * (m_t * g[i] - dbeta[ci] - xhat[i] * dgamma[ci])
                                }
                                NormMode::Eval => g[i] * gamma[ci] * inv_std[ci],
                            };
                        }
                    }
                }
                dx
            });
            vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
        },
    ))
}
