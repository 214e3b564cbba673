//! Forward and backward kernels for every operation the tape can record.

use num_complex::Complex;

use super::tape::Var;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Statistics source for batch normalization.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a, T> {
    /// Normalize with statistics of the current batch.
    Train,
    /// Normalize with frozen running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Shape bookkeeping for a (transposed) 2D convolution over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// `floor((len + 2·pad − k) / stride) + 1`, rejecting non-positive results.
    pub fn conv_output_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
        if stride == 0 || kernel == 0 {
            return Err(Error::Config("kernel and stride must be positive".into()));
        }
        let padded = len + 2 * padding;
        if padded < kernel {
            return Err(Error::Config(format!(
                "conv output length non-positive: input {len}, kernel {kernel}, padding {padding}"
            )));
        }
        Ok((padded - kernel) / stride + 1)
    }

    /// `(len − 1)·stride − 2·pad + k + output_padding`, rejecting non-positive results.
    pub fn conv_transpose_output_len(
        len: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<usize> {
        if stride == 0 || kernel == 0 || len == 0 {
            return Err(Error::Config("kernel, stride and input length must be positive".into()));
        }
        let full = (len - 1) * stride + kernel + output_padding;
        if full <= 2 * padding {
            return Err(Error::Config(format!(
                "transposed conv output length non-positive: input {len}, kernel {kernel}, padding {padding}"
            )));
        }
        Ok(full - 2 * padding)
    }
}

/// Range of source indices `t` for which `t·stride + k − pad` lands in `[0, dst_len)`.
#[inline]
fn valid_range(src_len: usize, dst_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let (s, k, p) = (stride as isize, k as isize, pad as isize);
    let lo = if p > k { (p - k + s - 1) / s } else { 0 };
    let top = dst_len as isize - 1 + p - k;
    if top < 0 {
        return (0, 0);
    }
    let hi = ((top / s) + 1).min(src_len as isize);
    (lo as usize, hi.max(lo) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum MaskKind {
    Channel,
    Spatial,
}

/// One recorded operation. `Var`s index earlier tape nodes.
#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    FullyConnected {
        x: Var,
        w: Var,
        b: Var,
        batch: usize,
        n_in: usize,
        n_out: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
        train: bool,
        dims: (usize, usize, usize),
    },
    Prelu {
        x: Var,
        slope: Var,
    },
    AvgPoolChannel {
        x: Var,
        dims: (usize, usize, usize),
    },
    AvgPoolSpatial {
        x: Var,
        dims: (usize, usize, usize),
    },
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_inner: usize,
        b_inner: usize,
    },
    Mask {
        x: Var,
        mask: Var,
        kind: MaskKind,
        dims: (usize, usize, usize),
    },
    Sigmoid {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
        rows: usize,
        len: usize,
    },
    PowerNormalize {
        x: Var,
        scale: Vec<T>,
        sumsq: Vec<T>,
    },
    ComplexAffine {
        x: Var,
        coef: Vec<Complex<T>>,
        rows: usize,
        len: usize,
    },
    Mse {
        x: Var,
        target: Vec<T>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::FullyConnected { x, w, b, .. }
            | Op::Conv2d { x, w, b, .. }
            | Op::ConvTranspose2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Prelu { x, slope } => vec![*x, *slope],
            Op::Concat { a, b, .. } => vec![*a, *b],
            Op::Mask { x, mask, .. } => vec![*x, *mask],
            Op::AvgPoolChannel { x, .. }
            | Op::AvgPoolSpatial { x, .. }
            | Op::Sigmoid { x }
            | Op::Reshape { x }
            | Op::Gather { x, .. }
            | Op::PowerNormalize { x, .. }
            | Op::ComplexAffine { x, .. }
            | Op::Mse { x, .. }
            | Op::WeightedSum { x, .. } => vec![*x],
        }
    }
}

// ---------------------------------------------------------------------------
// Forward kernels

pub(crate) fn fc_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], batch: usize, n_in: usize, n_out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * n_out);
    for n in 0..batch {
        let xr = &x[n * n_in..(n + 1) * n_in];
        for o in 0..n_out {
            let wr = &w[o * n_in..(o + 1) * n_in];
            let dot = wr.iter().zip(xr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            y.push(dot + b[o]);
        }
    }
    y
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], g: &ConvGeometry) -> Vec<T> {
    let (hi, wi, ho, wo, k) = (g.h_in, g.w_in, g.h_out, g.w_out, g.kernel);
    let mut y = vec![T::zero(); g.batch * g.c_out * ho * wo];
    for n in 0..g.batch {
        for o in 0..g.c_out {
            let out = &mut y[(n * g.c_out + o) * ho * wo..(n * g.c_out + o + 1) * ho * wo];
            out.iter_mut().for_each(|v| *v = b[o]);
            for i in 0..g.c_in {
                let xin = &x[(n * g.c_in + i) * hi * wi..(n * g.c_in + i + 1) * hi * wi];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(ho, hi, g.stride, ky, g.padding);
                    for kx in 0..k {
                        let wv = w[((o * g.c_in + i) * k + ky) * k + kx];
                        let (ox0, ox1) = valid_range(wo, wi, g.stride, kx, g.padding);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            let orow = &mut out[oy * wo..(oy + 1) * wo];
                            let irow = &xin[iy * wi..(iy + 1) * wi];
                            for ox in ox0..ox1 {
                                orow[ox] = orow[ox] + wv * irow[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn conv_transpose2d_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], g: &ConvGeometry) -> Vec<T> {
    let (hi, wi, ho, wo, k) = (g.h_in, g.w_in, g.h_out, g.w_out, g.kernel);
    let mut y = vec![T::zero(); g.batch * g.c_out * ho * wo];
    for n in 0..g.batch {
        for o in 0..g.c_out {
            y[(n * g.c_out + o) * ho * wo..(n * g.c_out + o + 1) * ho * wo]
                .iter_mut()
                .for_each(|v| *v = b[o]);
        }
        for i in 0..g.c_in {
            let xin = &x[(n * g.c_in + i) * hi * wi..(n * g.c_in + i + 1) * hi * wi];
            for o in 0..g.c_out {
                let out = &mut y[(n * g.c_out + o) * ho * wo..(n * g.c_out + o + 1) * ho * wo];
                for ky in 0..k {
                    let (iy0, iy1) = valid_range(hi, ho, g.stride, ky, g.padding);
                    for kx in 0..k {
                        let wv = w[((i * g.c_out + o) * k + ky) * k + kx];
                        let (ix0, ix1) = valid_range(wi, wo, g.stride, kx, g.padding);
                        for iy in iy0..iy1 {
                            let oy = iy * g.stride + ky - g.padding;
                            for ix in ix0..ix1 {
                                let ox = ix * g.stride + kx - g.padding;
                                out[oy * wo + ox] = out[oy * wo + ox] + wv * xin[iy * wi + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) struct BatchNormForward<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) fn batch_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    (batch, c, spatial): (usize, usize, usize),
    mode: BatchNormMode<'_, T>,
) -> BatchNormForward<T> {
    let eps = T::of(BATCH_NORM_EPS);
    let count = T::of((batch * spatial) as f64);
    let (mean, var) = match mode {
        BatchNormMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for n in 0..batch {
                    let base = (n * c + ch) * spatial;
                    s = s + x[base..base + spatial].iter().copied().sum::<T>();
                }
                let m = s / count;
                let mut v = T::zero();
                for n in 0..batch {
                    let base = (n * c + ch) * spatial;
                    v = v + x[base..base + spatial].iter().map(|&a| (a - m) * (a - m)).sum::<T>();
                }
                mean[ch] = m;
                var[ch] = v / count;
            }
            (mean, var)
        }
        BatchNormMode::Eval { mean, var } => (mean.to_vec(), var.to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for n in 0..batch {
        for ch in 0..c {
            let base = (n * c + ch) * spatial;
            for s in base..base + spatial {
                let h = (x[s] - mean[ch]) * inv_std[ch];
                xhat[s] = h;
                y[s] = gamma[ch] * h + beta[ch];
            }
        }
    }
    BatchNormForward {
        y,
        xhat,
        inv_std,
        mean,
        var,
    }
}

pub(crate) fn avg_pool_channel_forward<T: Scalar>(x: &[T], (batch, c, spatial): (usize, usize, usize)) -> Vec<T> {
    let denom = T::of(spatial as f64);
    (0..batch * c)
        .map(|p| x[p * spatial..(p + 1) * spatial].iter().copied().sum::<T>() / denom)
        .collect()
}

pub(crate) fn avg_pool_spatial_forward<T: Scalar>(x: &[T], (batch, c, spatial): (usize, usize, usize)) -> Vec<T> {
    let denom = T::of(c as f64);
    let mut y = vec![T::zero(); batch * spatial];
    for n in 0..batch {
        let out = &mut y[n * spatial..(n + 1) * spatial];
        for ch in 0..c {
            let plane = &x[(n * c + ch) * spatial..(n * c + ch + 1) * spatial];
            for (o, &v) in out.iter_mut().zip(plane) {
                *o = *o + v;
            }
        }
        out.iter_mut().for_each(|v| *v = *v / denom);
    }
    y
}

pub(crate) fn mask_forward<T: Scalar>(x: &[T], mask: &[T], kind: MaskKind, (batch, c, spatial): (usize, usize, usize)) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for n in 0..batch {
        for ch in 0..c {
            let base = (n * c + ch) * spatial;
            match kind {
                MaskKind::Channel => {
                    let m = mask[n * c + ch];
                    for s in 0..spatial {
                        y[base + s] = m * x[base + s];
                    }
                }
                MaskKind::Spatial => {
                    let m = &mask[n * spatial..(n + 1) * spatial];
                    for s in 0..spatial {
                        y[base + s] = m[s] * x[base + s];
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

// ---------------------------------------------------------------------------
// Backward kernels. Each returns the gradient for every input position in
// `Op::inputs()` order, `None` where the input does not need a gradient.

pub(crate) struct BackwardCtx<'a, T> {
    pub value: &'a Tensor<T>,
    pub gy: &'a [T],
    pub input_values: Vec<&'a Tensor<T>>,
    pub needs: Vec<bool>,
}

pub(crate) fn backward<T: Scalar>(op: &Op<T>, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
    let gy = ctx.gy;
    let inp = |i: usize| ctx.input_values[i].data();
    let need = |i: usize| ctx.needs[i];
    match op {
        Op::Leaf => vec![],
        Op::FullyConnected {
            batch, n_in, n_out, ..
        } => {
            let (x, w) = (inp(0), inp(1));
            let (batch, n_in, n_out) = (*batch, *n_in, *n_out);
            let gx = need(0).then(|| {
                let mut gx = vec![T::zero(); batch * n_in];
                for n in 0..batch {
                    for o in 0..n_out {
                        let g = gy[n * n_out + o];
                        let wr = &w[o * n_in..(o + 1) * n_in];
                        for (dst, &wv) in gx[n * n_in..(n + 1) * n_in].iter_mut().zip(wr) {
                            *dst = *dst + g * wv;
                        }
                    }
                }
                gx
            });
            let gw = need(1).then(|| {
                let mut gw = vec![T::zero(); n_out * n_in];
                for n in 0..batch {
                    let xr = &x[n * n_in..(n + 1) * n_in];
                    for o in 0..n_out {
                        let g = gy[n * n_out + o];
                        for (dst, &xv) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(xr) {
                            *dst = *dst + g * xv;
                        }
                    }
                }
                gw
            });
            let gb = need(2).then(|| {
                let mut gb = vec![T::zero(); n_out];
                for n in 0..batch {
                    for o in 0..n_out {
                        gb[o] = gb[o] + gy[n * n_out + o];
                    }
                }
                gb
            });
            vec![gx, gw, gb]
        }
        Op::Conv2d { geom: g, .. } => {
            let (x, w) = (inp(0), inp(1));
            let (hi, wi, ho, wo, k) = (g.h_in, g.w_in, g.h_out, g.w_out, g.kernel);
            let mut gx = need(0).then(|| vec![T::zero(); x.len()]);
            let mut gw = need(1).then(|| vec![T::zero(); w.len()]);
            let mut gb = need(2).then(|| vec![T::zero(); g.c_out]);
            for n in 0..g.batch {
                for o in 0..g.c_out {
                    let gout = &gy[(n * g.c_out + o) * ho * wo..(n * g.c_out + o + 1) * ho * wo];
                    if let Some(gb) = gb.as_mut() {
                        gb[o] = gb[o] + gout.iter().copied().sum::<T>();
                    }
                    for i in 0..g.c_in {
                        let xoff = (n * g.c_in + i) * hi * wi;
                        for ky in 0..k {
                            let (oy0, oy1) = valid_range(ho, hi, g.stride, ky, g.padding);
                            for kx in 0..k {
                                let widx = ((o * g.c_in + i) * k + ky) * k + kx;
                                let wv = w[widx];
                                let (ox0, ox1) = valid_range(wo, wi, g.stride, kx, g.padding);
                                let mut acc = T::zero();
                                for oy in oy0..oy1 {
                                    let iy = oy * g.stride + ky - g.padding;
                                    for ox in ox0..ox1 {
                                        let ix = ox * g.stride + kx - g.padding;
                                        let gv = gout[oy * wo + ox];
                                        let xi = xoff + iy * wi + ix;
                                        acc = acc + gv * x[xi];
                                        if let Some(gx) = gx.as_mut() {
                                            gx[xi] = gx[xi] + gv * wv;
                                        }
                                    }
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[widx] = gw[widx] + acc;
                                }
                            }
                        }
                    }
                }
            }
            vec![gx, gw, gb]
        }
        Op::ConvTranspose2d { geom: g, .. } => {
            let (x, w) = (inp(0), inp(1));
            let (hi, wi, ho, wo, k) = (g.h_in, g.w_in, g.h_out, g.w_out, g.kernel);
            let mut gx = need(0).then(|| vec![T::zero(); x.len()]);
            let mut gw = need(1).then(|| vec![T::zero(); w.len()]);
            let gb = need(2).then(|| {
                let mut gb = vec![T::zero(); g.c_out];
                for n in 0..g.batch {
                    for (o, gbo) in gb.iter_mut().enumerate() {
                        let gout = &gy[(n * g.c_out + o) * ho * wo..(n * g.c_out + o + 1) * ho * wo];
                        *gbo = *gbo + gout.iter().copied().sum::<T>();
                    }
                }
                gb
            });
            for n in 0..g.batch {
                for i in 0..g.c_in {
                    let xoff = (n * g.c_in + i) * hi * wi;
                    for o in 0..g.c_out {
                        let gout = &gy[(n * g.c_out + o) * ho * wo..(n * g.c_out + o + 1) * ho * wo];
                        for ky in 0..k {
                            let (iy0, iy1) = valid_range(hi, ho, g.stride, ky, g.padding);
                            for kx in 0..k {
                                let widx = ((i * g.c_out + o) * k + ky) * k + kx;
                                let wv = w[widx];
                                let (ix0, ix1) = valid_range(wi, wo, g.stride, kx, g.padding);
                                let mut acc = T::zero();
                                for iy in iy0..iy1 {
                                    let oy = iy * g.stride + ky - g.padding;
                                    for ix in ix0..ix1 {
                                        let ox = ix * g.stride + kx - g.padding;
                                        let gv = gout[oy * wo + ox];
                                        let xi = xoff + iy * wi + ix;
                                        acc = acc + gv * x[xi];
                                        if let Some(gx) = gx.as_mut() {
                                            gx[xi] = gx[xi] + gv * wv;
                                        }
                                    }
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[widx] = gw[widx] + acc;
                                }
                            }
                        }
                    }
                }
            }
            vec![gx, gw, gb]
        }
        Op::BatchNorm {
            xhat,
            inv_std,
            train,
            dims: (batch, c, spatial),
            ..
        } => {
            let gamma = inp(1);
            let (batch, c, spatial) = (*batch, *c, *spatial);
            let mut sum_gy = vec![T::zero(); c];
            let mut sum_gy_xhat = vec![T::zero(); c];
            for n in 0..batch {
                for ch in 0..c {
                    let base = (n * c + ch) * spatial;
                    for s in base..base + spatial {
                        sum_gy[ch] = sum_gy[ch] + gy[s];
                        sum_gy_xhat[ch] = sum_gy_xhat[ch] + gy[s] * xhat[s];
                    }
                }
            }
            let gx = need(0).then(|| {
                let m = T::of((batch * spatial) as f64);
                let mut gx = vec![T::zero(); gy.len()];
                for n in 0..batch {
                    for ch in 0..c {
                        let base = (n * c + ch) * spatial;
                        let scale = gamma[ch] * inv_std[ch];
                        for s in base..base + spatial {
                            gx[s] = if *train {
                                scale * (gy[s] - sum_gy[ch] / m - xhat[s] * sum_gy_xhat[ch] / m)
                            } else {
                                scale * gy[s]
                            };
                        }
                    }
                }
                gx
            });
            vec![gx, need(1).then_some(sum_gy_xhat), need(2).then_some(sum_gy)]
        }
        Op::Prelu { .. } => {
            let (x, slope) = (inp(0), inp(1)[0]);
            let gx = need(0).then(|| {
                x.iter()
                    .zip(gy)
                    .map(|(&xv, &g)| if xv >= T::zero() { g } else { slope * g })
                    .collect()
            });
            let gs = need(1).then(|| {
                vec![x
                    .iter()
                    .zip(gy)
                    .filter(|(&xv, _)| xv < T::zero())
                    .map(|(&xv, &g)| xv * g)
                    .sum::<T>()]
            });
            vec![gx, gs]
        }
        Op::AvgPoolChannel {
            dims: (batch, c, spatial),
            ..
        } => {
            let denom = T::of(*spatial as f64);
            let gx = need(0).then(|| {
                (0..batch * c * spatial)
                    .map(|i| gy[i / spatial] / denom)
                    .collect()
            });
            vec![gx]
        }
        Op::AvgPoolSpatial {
            dims: (batch, c, spatial),
            ..
        } => {
            let denom = T::of(*c as f64);
            let gx = need(0).then(|| {
                (0..batch * c * spatial)
                    .map(|i| {
                        let n = i / (c * spatial);
                        gy[n * spatial + i % spatial] / denom
                    })
                    .collect()
            });
            vec![gx]
        }
        Op::Concat {
            outer,
            a_inner,
            b_inner,
            ..
        } => {
            let row = a_inner + b_inner;
            let ga = need(0).then(|| {
                (0..outer * a_inner)
                    .map(|i| gy[(i / a_inner) * row + i % a_inner])
                    .collect()
            });
            let gb = need(1).then(|| {
                (0..outer * b_inner)
                    .map(|i| gy[(i / b_inner) * row + a_inner + i % b_inner])
                    .collect()
            });
            vec![ga, gb]
        }
        Op::Mask {
            kind,
            dims: (batch, c, spatial),
            ..
        } => {
            let (x, mask) = (inp(0), inp(1));
            let (batch, c, spatial) = (*batch, *c, *spatial);
            let gx = need(0).then(|| mask_forward(gy, mask, *kind, (batch, c, spatial)));
            let gm = need(1).then(|| {
                let mut gm = vec![T::zero(); mask.len()];
                for n in 0..batch {
                    for ch in 0..c {
                        let base = (n * c + ch) * spatial;
                        for s in 0..spatial {
                            let prod = gy[base + s] * x[base + s];
                            let idx = match kind {
                                MaskKind::Channel => n * c + ch,
                                MaskKind::Spatial => n * spatial + s,
                            };
                            gm[idx] = gm[idx] + prod;
                        }
                    }
                }
                gm
            });
            vec![gx, gm]
        }
        Op::Sigmoid { .. } => {
            let y = ctx.value.data();
            vec![need(0).then(|| {
                y.iter()
                    .zip(gy)
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect()
            })]
        }
        Op::Reshape { .. } => vec![need(0).then(|| gy.to_vec())],
        Op::Gather { index, rows, len, .. } => {
            let gx = need(0).then(|| {
                let mut gx = vec![T::zero(); gy.len()];
                let per_batch = rows * len;
                for (r, chunk) in gy.chunks(*len).enumerate() {
                    let n = r * len / per_batch;
                    let idx = &index[n * len..(n + 1) * len];
                    let dst = &mut gx[r * len..(r + 1) * len];
                    for (i, &g) in chunk.iter().enumerate() {
                        dst[idx[i]] = dst[idx[i]] + g;
                    }
                }
                gx
            });
            vec![gx]
        }
        Op::PowerNormalize { scale, sumsq, .. } => {
            let x = inp(0);
            let batch = scale.len();
            let per = x.len() / batch;
            let gx = need(0).then(|| {
                let mut gx = vec![T::zero(); x.len()];
                for n in 0..batch {
                    let r = n * per..(n + 1) * per;
                    let dot: T = x[r.clone()].iter().zip(&gy[r.clone()]).map(|(&a, &b)| a * b).sum();
                    let coeff = scale[n] * dot / sumsq[n];
                    for i in r {
                        gx[i] = scale[n] * gy[i] - coeff * x[i];
                    }
                }
                gx
            });
            vec![gx]
        }
        Op::ComplexAffine { coef, rows, len, .. } => {
            let gx = need(0).then(|| {
                let batch = coef.len() / len;
                let plane = rows * len;
                let mut gx = vec![T::zero(); gy.len()];
                for n in 0..batch {
                    let base = n * 2 * plane;
                    for r in 0..*rows {
                        for k in 0..*len {
                            let c = coef[n * len + k];
                            let re = base + r * len + k;
                            let im = re + plane;
                            gx[re] = c.re * gy[re] + c.im * gy[im];
                            gx[im] = -c.im * gy[re] + c.re * gy[im];
                        }
                    }
                }
                gx
            });
            vec![gx]
        }
        Op::Mse { target, .. } => {
            let x = inp(0);
            let g = gy[0] * T::of(2.0) / T::of(x.len() as f64);
            vec![need(0).then(|| x.iter().zip(target).map(|(&a, &t)| g * (a - t)).collect())]
        }
        Op::WeightedSum { weights, .. } => {
            vec![need(0).then(|| weights.iter().map(|&w| w * gy[0]).collect())]
        }
    }
}
