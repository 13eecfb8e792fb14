//! Forward and backward kernels for every differentiable op.
//!
//! These are plain functions over [`FeatureMap`]s; the tape in
//! [`super::tape`] records which of them ran and replays the backward
//! counterparts in reverse order. Convolution parallelizes over the batch
//! axis; everything else is cheap enough single-threaded.

use rayon::prelude::*;

use super::{real, FeatureMap, Scalar};
use crate::error::{Error, Result};

/// Pointwise activation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Sigmoid,
    Silu,
    /// `sigmoid(x) - 1/2`: odd, bounded in (-1/2, 1/2).
    SymmetricSigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EltwiseOp {
    Add,
    Mul,
}

/// Moments over a channel: per-neuron leave-one-out or whole-channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MomentsMode {
    #[default]
    LeaveOneOut,
    WholeChannel,
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn apply_activation<T: Scalar>(x: &FeatureMap<T>, kind: Activation) -> FeatureMap<T> {
    let half = real::<T>(0.5);
    match kind {
        Activation::Identity => x.clone(),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Silu => x.map(|v| v * sigmoid(v)),
        Activation::SymmetricSigmoid => x.map(|v| sigmoid(v) - half),
    }
}

/// d(activation)/dx evaluated at the input value.
#[inline]
pub fn activation_derivative<T: Scalar>(x: T, kind: Activation) -> T {
    match kind {
        Activation::Identity => T::one(),
        Activation::Sigmoid | Activation::SymmetricSigmoid => {
            let s = sigmoid(x);
            s * (T::one() - s)
        }
        Activation::Silu => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
    }
}

fn conv_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < k {
        return Err(Error::Shape(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Valid output range along one axis for a kernel offset: all `o` with
/// `0 <= o * stride + k - padding < input`.
#[inline]
fn valid_out_range(
    out_len: usize,
    input: usize,
    stride: usize,
    k: usize,
    padding: usize,
) -> (usize, usize) {
    let lo = (padding.saturating_sub(k) + stride - 1) / stride;
    if k > input - 1 + padding {
        return (0, 0);
    }
    let hi = ((input - 1 + padding - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Exact discrete cross-correlation. Weights are `(Cout, Cin, Kh, Kw)`,
/// bias is `(1, Cout, 1, 1)`. Row-wise multiply-accumulate inner loops;
/// parallel over the batch.
pub fn conv2d<T: Scalar>(
    x: &FeatureMap<T>,
    w: &FeatureMap<T>,
    bias: Option<&FeatureMap<T>>,
    stride: usize,
    padding: usize,
) -> Result<FeatureMap<T>> {
    if stride == 0 {
        return Err(Error::InvalidArg("conv2d stride must be >= 1".into()));
    }
    let [n, cin, h, wid] = x.shape();
    let [cout, wcin, kh, kw] = w.shape();
    if wcin != cin {
        return Err(Error::DimMismatch {
            axis: "input channels",
            expected: wcin,
            got: cin,
            context: "conv2d weight vs input",
        });
    }
    if let Some(b) = bias {
        if b.shape() != [1, cout, 1, 1] {
            return Err(Error::DimMismatch {
                axis: "bias channels",
                expected: cout,
                got: b.numel(),
                context: "conv2d bias",
            });
        }
    }
    let oh = conv_out_extent(h, kh, stride, padding)?;
    let ow = conv_out_extent(wid, kw, stride, padding)?;

    let mut out = FeatureMap::zeros([n, cout, oh, ow]);
    let out_img = cout * oh * ow;
    let wd = w.data();
    out.data_mut()
        .par_chunks_mut(out_img)
        .enumerate()
        .for_each(|(ni, out_n)| {
            for co in 0..cout {
                let och = &mut out_n[co * oh * ow..(co + 1) * oh * ow];
                if let Some(b) = bias {
                    let bv = b.data()[co];
                    for v in och.iter_mut() {
                        *v = bv;
                    }
                }
                let wbase = co * cin * kh * kw;
                for ci in 0..cin {
                    let xch = x.channel(ni, ci);
                    let wch = &wd[wbase + ci * kh * kw..wbase + (ci + 1) * kh * kw];
                    for ky in 0..kh {
                        let (oh_lo, oh_hi) = valid_out_range(oh, h, stride, ky, padding);
                        for kx in 0..kw {
                            let wv = wch[ky * kw + kx];
                            let (ow_lo, ow_hi) = valid_out_range(ow, wid, stride, kx, padding);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            for yo in oh_lo..oh_hi {
                                let iy = yo * stride + ky - padding;
                                let xrow = &xch[iy * wid..(iy + 1) * wid];
                                let orow = &mut och[yo * ow..(yo + 1) * ow];
                                if stride == 1 {
                                    let ix0 = ow_lo + kx - padding;
                                    let src = &xrow[ix0..ix0 + (ow_hi - ow_lo)];
                                    for (o, &xv) in orow[ow_lo..ow_hi].iter_mut().zip(src) {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for xo in ow_lo..ow_hi {
                                        orow[xo] += wv * xrow[xo * stride + kx - padding];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d`] w.r.t. input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &FeatureMap<T>,
    w: &FeatureMap<T>,
    dout: &FeatureMap<T>,
    stride: usize,
    padding: usize,
    want_bias: bool,
) -> (FeatureMap<T>, FeatureMap<T>, Option<FeatureMap<T>>) {
    let [n, cin, h, wid] = x.shape();
    let [cout, _, kh, kw] = w.shape();
    let [_, _, oh, ow] = dout.shape();

    let wd = w.data();
    // per-image partials, reduced in batch order for determinism
    let partials: Vec<(FeatureMap<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let mut dx_n = FeatureMap::zeros([1, cin, h, wid]);
            let mut dw_n = vec![T::zero(); wd.len()];
            let mut db_n = vec![T::zero(); cout];
            for co in 0..cout {
                let wbase = co * cin * kh * kw;
                let dch = dout.channel(ni, co);
                db_n[co] += dch.iter().copied().sum::<T>();
                for ci in 0..cin {
                    let xch = x.channel(ni, ci);
                    let dxch = dx_n.channel_mut(0, ci);
                    let wch = &wd[wbase + ci * kh * kw..wbase + (ci + 1) * kh * kw];
                    let dwch = &mut dw_n[wbase + ci * kh * kw..wbase + (ci + 1) * kh * kw];
                    for ky in 0..kh {
                        let (oh_lo, oh_hi) = valid_out_range(oh, h, stride, ky, padding);
                        for kx in 0..kw {
                            let wv = wch[ky * kw + kx];
                            let (ow_lo, ow_hi) = valid_out_range(ow, wid, stride, kx, padding);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let mut wacc = T::zero();
                            for yo in oh_lo..oh_hi {
                                let iy = yo * stride + ky - padding;
                                let grow = &dch[yo * ow..(yo + 1) * ow];
                                let xrow_base = iy * wid;
                                if stride == 1 {
                                    let ix0 = ow_lo + kx - padding;
                                    let len = ow_hi - ow_lo;
                                    let xrow = &xch[xrow_base + ix0..xrow_base + ix0 + len];
                                    let dxrow =
                                        &mut dxch[xrow_base + ix0..xrow_base + ix0 + len];
                                    for ((&g, &xv), dxv) in grow[ow_lo..ow_hi]
                                        .iter()
                                        .zip(xrow)
                                        .zip(dxrow.iter_mut())
                                    {
                                        wacc += g * xv;
                                        *dxv += g * wv;
                                    }
                                } else {
                                    for xo in ow_lo..ow_hi {
                                        let xi = xrow_base + xo * stride + kx - padding;
                                        let g = grow[xo];
                                        wacc += g * xch[xi];
                                        dxch[xi] += g * wv;
                                    }
                                }
                            }
                            dwch[ky * kw + kx] += wacc;
                        }
                    }
                }
            }
            (dx_n, dw_n, db_n)
        })
        .collect();

    let mut dx = FeatureMap::zeros([n, cin, h, wid]);
    let mut dw = FeatureMap::zeros(w.shape());
    let mut db = vec![T::zero(); cout];
    let img = cin * h * wid;
    for (ni, (dx_n, dw_n, db_n)) in partials.into_iter().enumerate() {
        dx.data_mut()[ni * img..(ni + 1) * img].copy_from_slice(dx_n.data());
        for (a, b) in dw.data_mut().iter_mut().zip(dw_n) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(db_n) {
            *a += b;
        }
    }
    let db = want_bias.then(|| FeatureMap::per_channel(db));
    (dx, dw, db)
}

/// Max pooling; returns the output and the flat input index of each winner
/// (first scanned wins ties) for the backward pass.
pub fn maxpool2d<T: Scalar>(
    x: &FeatureMap<T>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(FeatureMap<T>, Vec<u32>)> {
    if stride == 0 || k == 0 {
        return Err(Error::InvalidArg("maxpool kernel/stride must be >= 1".into()));
    }
    if 2 * padding >= k {
        return Err(Error::InvalidArg(format!(
            "maxpool padding {padding} too large for kernel {k}"
        )));
    }
    let [n, c, h, w] = x.shape();
    let oh = conv_out_extent(h, k, stride, padding)?;
    let ow = conv_out_extent(w, k, stride, padding)?;
    let mut out = FeatureMap::zeros([n, c, oh, ow]);
    let mut arg = vec![0u32; out.numel()];
    let mut oi = 0;
    for ni in 0..n {
        for ci in 0..c {
            let xch = x.channel(ni, ci);
            let base = ((ni * c + ci) * h * w) as u32;
            for yo in 0..oh {
                let ky_lo = padding.saturating_sub(yo * stride);
                let ky_hi = k.min(h + padding - yo * stride);
                for xo in 0..ow {
                    let kx_lo = padding.saturating_sub(xo * stride);
                    let kx_hi = k.min(w + padding - xo * stride);
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for ky in ky_lo..ky_hi {
                        let iy = yo * stride + ky - padding;
                        for kx in kx_lo..kx_hi {
                            let ix = xo * stride + kx - padding;
                            let v = xch[iy * w + ix];
                            if v > best {
                                best = v;
                                best_idx = iy * w + ix;
                            }
                        }
                    }
                    out.data_mut()[oi] = best;
                    arg[oi] = base + best_idx as u32;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2d_backward<T: Scalar>(
    x_shape: [usize; 4],
    argmax: &[u32],
    dout: &FeatureMap<T>,
) -> FeatureMap<T> {
    let mut dx = FeatureMap::zeros(x_shape);
    for (g, &src) in dout.data().iter().zip(argmax) {
        dx.data_mut()[src as usize] += *g;
    }
    dx
}

pub fn upsample_nearest<T: Scalar>(x: &FeatureMap<T>, factor: usize) -> Result<FeatureMap<T>> {
    if factor == 0 {
        return Err(Error::InvalidArg("upsample factor must be >= 1".into()));
    }
    let [n, c, h, w] = x.shape();
    let mut out = FeatureMap::zeros([n, c, h * factor, w * factor]);
    for ni in 0..n {
        for ci in 0..c {
            let src = x.channel(ni, ci);
            let dst = out.channel_mut(ni, ci);
            for y in 0..h * factor {
                let sy = y / factor;
                for x2 in 0..w * factor {
                    dst[y * w * factor + x2] = src[sy * w + x2 / factor];
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest_backward<T: Scalar>(
    x_shape: [usize; 4],
    factor: usize,
    dout: &FeatureMap<T>,
) -> FeatureMap<T> {
    let [n, c, h, w] = x_shape;
    let mut dx = FeatureMap::zeros(x_shape);
    for ni in 0..n {
        for ci in 0..c {
            let dst = dout.channel(ni, ci);
            let src = dx.channel_mut(ni, ci);
            for y in 0..h * factor {
                for x2 in 0..w * factor {
                    src[(y / factor) * w + x2 / factor] += dst[y * w * factor + x2];
                }
            }
        }
    }
    dx
}

pub fn concat_channels<T: Scalar>(xs: &[&FeatureMap<T>]) -> Result<FeatureMap<T>> {
    if xs.is_empty() {
        return Err(Error::InvalidArg("concat of zero inputs".into()));
    }
    let [n, _, h, w] = xs[0].shape();
    let mut c_total = 0;
    for x in xs {
        let [xn, xc, xh, xw] = x.shape();
        if xn != n || xh != h || xw != w {
            return Err(Error::Shape(format!(
                "concat inputs must share N,H,W: {:?} vs {:?}",
                xs[0].shape(),
                x.shape()
            )));
        }
        c_total += xc;
    }
    let mut out = FeatureMap::zeros([n, c_total, h, w]);
    for ni in 0..n {
        let mut co = 0;
        for x in xs {
            for ci in 0..x.channels() {
                out.channel_mut(ni, co).copy_from_slice(x.channel(ni, ci));
                co += 1;
            }
        }
    }
    Ok(out)
}

/// Take channels [start, start+len) of x.
pub fn slice_channels<T: Scalar>(
    x: &FeatureMap<T>,
    start: usize,
    len: usize,
) -> Result<FeatureMap<T>> {
    let [n, c, h, w] = x.shape();
    if start + len > c {
        return Err(Error::Shape(format!(
            "channel slice {start}..{} out of range (C={c})",
            start + len
        )));
    }
    let mut out = FeatureMap::zeros([n, len, h, w]);
    for ni in 0..n {
        for ci in 0..len {
            out.channel_mut(ni, ci)
                .copy_from_slice(x.channel(ni, start + ci));
        }
    }
    Ok(out)
}

/// Broadcast-aware elementwise op. The right operand either matches the left
/// shape exactly or is a per-channel scalar `(1,C,1,1)` / `(N,C,1,1)`.
pub fn eltwise<T: Scalar>(
    a: &FeatureMap<T>,
    b: &FeatureMap<T>,
    op: EltwiseOp,
) -> Result<FeatureMap<T>> {
    let f = |x: T, y: T| match op {
        EltwiseOp::Add => x + y,
        EltwiseOp::Mul => x * y,
    };
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return FeatureMap::new(a.shape(), data);
    }
    let [n, c, h, w] = a.shape();
    let [bn, bc, bh, bw] = b.shape();
    if bc == c && bh == 1 && bw == 1 && (bn == 1 || bn == n) {
        let mut out = FeatureMap::zeros([n, c, h, w]);
        for ni in 0..n {
            let bi = if bn == 1 { 0 } else { ni };
            for ci in 0..c {
                let s = b.at(bi, ci, 0, 0);
                let src = a.channel(ni, ci);
                let dst = out.channel_mut(ni, ci);
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d = f(x, s);
                }
            }
        }
        return Ok(out);
    }
    Err(Error::Shape(format!(
        "elementwise shapes incompatible: {:?} vs {:?}",
        a.shape(),
        b.shape()
    )))
}

/// Reduce `g` (shaped like the broadcast output) back to `shape` by summing
/// the broadcast axes. Used by elementwise backward.
pub fn reduce_to_shape<T: Scalar>(g: &FeatureMap<T>, shape: [usize; 4]) -> FeatureMap<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let [n, c, _, _] = g.shape();
    let [sn, sc, sh, sw] = shape;
    debug_assert!(sc == c && sh == 1 && sw == 1 && (sn == 1 || sn == n));
    let mut out = FeatureMap::zeros(shape);
    for ni in 0..n {
        let oi = if sn == 1 { 0 } else { ni };
        for ci in 0..c {
            let s: T = g.channel(ni, ci).iter().copied().sum();
            *out.at_mut(oi, ci, 0, 0) += s;
        }
    }
    out
}

/// Batched matrix product: `(N,G,R,K) x (N,G,K,C) -> (N,G,R,C)`.
pub fn matmul<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let [n, g, r, k] = a.shape();
    let [bn, bg, bk, c] = b.shape();
    if bn != n || bg != g || bk != k {
        return Err(Error::Shape(format!(
            "matmul shapes incompatible: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = FeatureMap::zeros([n, g, r, c]);
    for ni in 0..n {
        for gi in 0..g {
            let amat = a.channel(ni, gi); // r x k
            let bmat = b.channel(ni, gi); // k x c
            let omat = out.channel_mut(ni, gi); // r x c
            for ri in 0..r {
                let arow = &amat[ri * k..(ri + 1) * k];
                let orow = &mut omat[ri * c..(ri + 1) * c];
                for (ki, &av) in arow.iter().enumerate() {
                    let brow = &bmat[ki * c..(ki + 1) * c];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Swap the last two axes: `(N,G,R,C) -> (N,G,C,R)`.
pub fn transpose_last2<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let [n, g, r, c] = x.shape();
    let mut out = FeatureMap::zeros([n, g, c, r]);
    for ni in 0..n {
        for gi in 0..g {
            let src = x.channel(ni, gi);
            let dst = out.channel_mut(ni, gi);
            for ri in 0..r {
                for ci in 0..c {
                    dst[ci * r + ri] = src[ri * c + ci];
                }
            }
        }
    }
    out
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let [n, g, r, c] = x.shape();
    let mut out = x.clone();
    for ni in 0..n {
        for gi in 0..g {
            let row_base = out.channel_mut(ni, gi);
            for ri in 0..r {
                let row = &mut row_base[ri * c..(ri + 1) * c];
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v = *v / z;
                }
            }
        }
    }
    out
}

/// Backward of softmax given its output `y`: `dx = y * (dout - sum(dout*y))`.
pub fn softmax_last_backward<T: Scalar>(y: &FeatureMap<T>, dout: &FeatureMap<T>) -> FeatureMap<T> {
    let [n, g, r, c] = y.shape();
    let mut dx = FeatureMap::zeros(y.shape());
    for ni in 0..n {
        for gi in 0..g {
            let ych = y.channel(ni, gi);
            let gch = dout.channel(ni, gi);
            let dch = dx.channel_mut(ni, gi);
            for ri in 0..r {
                let yr = &ych[ri * c..(ri + 1) * c];
                let gr = &gch[ri * c..(ri + 1) * c];
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ci in 0..c {
                    dch[ri * c + ci] = yr[ci] * (gr[ci] - dot);
                }
            }
        }
    }
    dx
}

/// Per-neuron (leave-one-out) or per-channel moments.
///
/// Leave-one-out uses the two-reduction identity: with S and Q the channel
/// sum and sum of squares over M = H*W neurons,
/// `mu_t = (S - t)/(M-1)` and `var_t = ((Q - t^2) - (M-1) mu_t^2)/(M-1)`.
/// Output shapes: leave-one-out gives two maps shaped like `x`; whole-channel
/// gives `(N,C,1,1)` maps.
pub fn channel_moments<T: Scalar>(
    x: &FeatureMap<T>,
    mode: MomentsMode,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let [n, c, h, w] = x.shape();
    let m = h * w;
    match mode {
        MomentsMode::LeaveOneOut => {
            if m < 2 {
                return Err(Error::DegenerateChannel);
            }
            let mut mu = FeatureMap::zeros(x.shape());
            let mut var = FeatureMap::zeros(x.shape());
            let m1 = real::<T>((m - 1) as f64);
            for ni in 0..n {
                for ci in 0..c {
                    let xs = x.channel(ni, ci);
                    let s: T = xs.iter().copied().sum();
                    let q: T = xs.iter().map(|&v| v * v).sum();
                    let mch = mu.channel_mut(ni, ci);
                    for (mt, &t) in mch.iter_mut().zip(xs) {
                        *mt = (s - t) / m1;
                    }
                    let vch = var.channel_mut(ni, ci);
                    for i in 0..m {
                        let t = xs[i];
                        let mu_t = (s - t) / m1;
                        // guard tiny negative from cancellation
                        let v = ((q - t * t) - m1 * mu_t * mu_t) / m1;
                        vch[i] = v.max(T::zero());
                    }
                }
            }
            Ok((mu, var))
        }
        MomentsMode::WholeChannel => {
            let mut mu = FeatureMap::zeros([n, c, 1, 1]);
            let mut var = FeatureMap::zeros([n, c, 1, 1]);
            let mf = real::<T>(m as f64);
            for ni in 0..n {
                for ci in 0..c {
                    let xs = x.channel(ni, ci);
                    let s: T = xs.iter().copied().sum();
                    let mean = s / mf;
                    let q: T = xs.iter().map(|&v| (v - mean) * (v - mean)).sum();
                    *mu.at_mut(ni, ci, 0, 0) = mean;
                    *var.at_mut(ni, ci, 0, 0) = (q / mf).max(T::zero());
                }
            }
            Ok((mu, var))
        }
    }
}

/// Batch statistics over (N,H,W) per channel; biased variance.
pub fn batch_stats<T: Scalar>(x: &FeatureMap<T>) -> (Vec<T>, Vec<T>) {
    let [n, c, h, w] = x.shape();
    let m = real::<T>((n * h * w) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for ni in 0..n {
            s += x.channel(ni, ci).iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut q = T::zero();
        for ni in 0..n {
            q += x
                .channel(ni, ci)
                .iter()
                .map(|&v| (v - mu) * (v - mu))
                .sum::<T>();
        }
        mean[ci] = mu;
        var[ci] = (q / m).max(T::zero());
    }
    (mean, var)
}

/// Normalize with given per-channel stats and apply the affine transform.
pub fn batch_norm_apply<T: Scalar>(
    x: &FeatureMap<T>,
    mean: &[T],
    var: &[T],
    gamma: &FeatureMap<T>,
    beta: &FeatureMap<T>,
    eps: T,
) -> FeatureMap<T> {
    let [n, c, _, _] = x.shape();
    let mut out = x.clone();
    for ci in 0..c {
        let inv = T::one() / (var[ci] + eps).sqrt();
        let g = gamma.data()[ci];
        let b = beta.data()[ci];
        let mu = mean[ci];
        for ni in 0..n {
            for v in out.channel_mut(ni, ci) {
                *v = (*v - mu) * inv * g + b;
            }
        }
    }
    out
}

/// Backward of batch norm.
///
/// `through_stats` distinguishes training mode (statistics computed from this
/// batch, so gradients flow through them) from inference mode (frozen running
/// statistics, a pure affine map).
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<T: Scalar>(
    x: &FeatureMap<T>,
    mean: &[T],
    var: &[T],
    gamma: &FeatureMap<T>,
    eps: T,
    dout: &FeatureMap<T>,
    through_stats: bool,
) -> (FeatureMap<T>, FeatureMap<T>, FeatureMap<T>) {
    let [n, c, h, w] = x.shape();
    let m = real::<T>((n * h * w) as f64);
    let mut dx = FeatureMap::zeros(x.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let inv = T::one() / (var[ci] + eps).sqrt();
        let g = gamma.data()[ci];
        let mu = mean[ci];
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for ni in 0..n {
            let xs = x.channel(ni, ci);
            let ds = dout.channel(ni, ci);
            for i in 0..h * w {
                let xhat = (xs[i] - mu) * inv;
                sum_d += ds[i];
                sum_dx += ds[i] * xhat;
            }
        }
        dgamma[ci] = sum_dx;
        dbeta[ci] = sum_d;
        let mean_d = sum_d / m;
        let mean_dx = sum_dx / m;
        for ni in 0..n {
            let xs = x.channel(ni, ci);
            let ds = dx.channel_mut(ni, ci);
            let dos = dout.channel(ni, ci);
            for i in 0..h * w {
                let xhat = (xs[i] - mu) * inv;
                ds[i] = if through_stats {
                    g * inv * (dos[i] - mean_d - xhat * mean_dx)
                } else {
                    g * inv * dos[i]
                };
            }
        }
    }
    (dx, FeatureMap::per_channel(dgamma), FeatureMap::per_channel(dbeta))
}

/// Bilinear resize to an arbitrary target size (half-pixel centers).
/// Used for saliency upsampling; not differentiable, not on the tape.
pub fn resize_bilinear<T: Scalar>(
    x: &FeatureMap<T>,
    out_h: usize,
    out_w: usize,
) -> FeatureMap<T> {
    let [n, c, h, w] = x.shape();
    let mut out = FeatureMap::zeros([n, c, out_h, out_w]);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for ni in 0..n {
        for ci in 0..c {
            let src = x.channel(ni, ci);
            let dst = out.channel_mut(ni, ci);
            for y in 0..out_h {
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let wy = real::<T>(fy - y0 as f64);
                for x2 in 0..out_w {
                    let fx = ((x2 as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let wx = real::<T>(fx - x0 as f64);
                    let one = T::one();
                    let top = src[y0 * w + x0] * (one - wx) + src[y0 * w + x1] * wx;
                    let bot = src[y1 * w + x0] * (one - wx) + src[y1 * w + x1] * wx;
                    dst[y * out_w + x2] = top * (one - wy) + bot * wy;
                }
            }
        }
    }
    out
}
