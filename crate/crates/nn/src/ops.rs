//! Forward and backward kernels. All tensors are `(N, C, D, H, W)`.

use crate::error::{NnError, Result};
use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::Tensor;

/// Upper bound on im2col buffer elements; convolutions are chunked over
/// `z` planes to stay below it.
pub const IM2COL_BUDGET: usize = 8 << 20;

fn z_chunk(k: usize, hw: usize, d: usize) -> usize {
    (IM2COL_BUDGET / (k * hw).max(1)).clamp(1, d)
}

/// Fills `cols` (`ci·27 × (z1-z0)·h·w`) with the zero-padded 3×3×3
/// neighbourhoods of planes `z0..z1` of one sample.
fn im2col3<T: Scalar>(x: &[T], ci: usize, [d, h, w]: [usize; 3], z0: usize, z1: usize, cols: &mut [T]) {
    let hw = h * w;
    let p = (z1 - z0) * hw;
    for c in 0..ci {
        let xc = &x[c * d * hw..(c + 1) * d * hw];
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let r = c * 27 + kz * 9 + ky * 3 + kx;
                    let row = &mut cols[r * p..(r + 1) * p];
                    for z in z0..z1 {
                        let dst_plane = &mut row[(z - z0) * hw..(z - z0 + 1) * hw];
                        let sz = z as isize + kz as isize - 1;
                        if sz < 0 || sz >= d as isize {
                            dst_plane.fill(T::zero());
                            continue;
                        }
                        let src_plane = &xc[sz as usize * hw..(sz as usize + 1) * hw];
                        for y in 0..h {
                            let dst = &mut dst_plane[y * w..(y + 1) * w];
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                dst.fill(T::zero());
                                continue;
                            }
                            let src = &src_plane[sy as usize * w..(sy as usize + 1) * w];
                            match kx {
                                0 => {
                                    dst[0] = T::zero();
                                    dst[1..].copy_from_slice(&src[..w - 1]);
                                }
                                1 => dst.copy_from_slice(src),
                                _ => {
                                    dst[..w - 1].copy_from_slice(&src[1..]);
                                    dst[w - 1] = T::zero();
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatters `cols` back into `dx`, accumulating.
fn col2im3<T: Scalar>(cols: &[T], ci: usize, [d, h, w]: [usize; 3], z0: usize, z1: usize, dx: &mut [T]) {
    let hw = h * w;
    let p = (z1 - z0) * hw;
    for c in 0..ci {
        let dxc = &mut dx[c * d * hw..(c + 1) * d * hw];
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let r = c * 27 + kz * 9 + ky * 3 + kx;
                    let row = &cols[r * p..(r + 1) * p];
                    for z in z0..z1 {
                        let sz = z as isize + kz as isize - 1;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        let src_plane = &row[(z - z0) * hw..(z - z0 + 1) * hw];
                        let dst_plane = &mut dxc[sz as usize * hw..(sz as usize + 1) * hw];
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src = &src_plane[y * w..(y + 1) * w];
                            let dst = &mut dst_plane[sy as usize * w..(sy as usize + 1) * w];
                            match kx {
                                0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(a, &b)| *a += b),
                                1 => dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b),
                                _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(a, &b)| *a += b),
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut Tensor<T>, b: &Tensor<T>) {
    let [n, c, ..] = out.shape();
    let s = out.spatial_len();
    let bias = b.data();
    let data = out.data_mut();
    for i in 0..n {
        for (ch, &bv) in bias.iter().enumerate().take(c) {
            data[(i * c + ch) * s..(i * c + ch + 1) * s].iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, ..] = dy.shape();
    let s = dy.spatial_len();
    let mut db = vec![T::zero(); c];
    for i in 0..n {
        for (ch, g) in db.iter_mut().enumerate() {
            *g += dy.data()[(i * c + ch) * s..(i * c + ch + 1) * s].iter().copied().sum();
        }
    }
    Tensor::vector(db)
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(NnError::Shape(msg()))
    }
}

/// 3×3×3 convolution, stride 1, zero padding 1. `w` is `[Co, Ci, 3, 3, 3]`.
pub fn conv3_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ci, d, h, wd] = x.shape();
    let co = w.shape()[0];
    check(w.shape() == [co, ci, 3, 3, 3] && b.len() == co, || {
        format!("conv3 weight {:?} does not fit input {:?}", w.shape(), x.shape())
    })?;
    let (hw, dhw, k) = (h * wd, d * h * wd, ci * 27);
    let dz = z_chunk(k, hw, d);
    let mut out = Tensor::zeros([n, co, d, h, wd]);
    let mut cols = vec![T::zero(); k * dz * hw];
    for s in 0..n {
        let xs = x.sample(s);
        let os = out.sample_mut(s);
        for z0 in (0..d).step_by(dz) {
            let z1 = (z0 + dz).min(d);
            let p = (z1 - z0) * hw;
            let cols = &mut cols[..k * p];
            im2col3(xs, ci, [d, h, wd], z0, z1, cols);
            gemm(T::one(), Mat::new(w.data(), co, k), Mat::new(cols, k, p), T::zero(), &mut os[z0 * hw..], dhw);
        }
    }
    add_bias(&mut out, b);
    Ok(out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv3_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> ConvGrads<T> {
    let [n, ci, d, h, wd] = x.shape();
    let co = w.shape()[0];
    let (hw, dhw, k) = (h * wd, d * h * wd, ci * 27);
    let dz = z_chunk(k, hw, d);
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = vec![T::zero(); k * dz * hw];
    let mut dcols = if need_dx { vec![T::zero(); k * dz * hw] } else { Vec::new() };
    for s in 0..n {
        let xs = x.sample(s);
        let dys = dy.sample(s);
        for z0 in (0..d).step_by(dz) {
            let z1 = (z0 + dz).min(d);
            let p = (z1 - z0) * hw;
            let cols = &mut cols[..k * p];
            im2col3(xs, ci, [d, h, wd], z0, z1, cols);
            let dy_chunk = Mat::new(&dys[z0 * hw..], co, p).with_ld(dhw);
            gemm(T::one(), dy_chunk, Mat::t(cols, p, k), T::one(), dw.data_mut(), k);
            if let Some(dx) = dx.as_mut() {
                let dcols = &mut dcols[..k * p];
                gemm(T::one(), Mat::t(w.data(), k, co), dy_chunk, T::zero(), dcols, p);
                col2im3(dcols, ci, [d, h, wd], z0, z1, dx.sample_mut(s));
            }
        }
    }
    ConvGrads {
        dx,
        dw,
        db: bias_grad(dy),
    }
}

/// Pointwise convolution. `w` is `[Co, Ci, 1, 1, 1]`.
pub fn conv1_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ci, d, h, wd] = x.shape();
    let co = w.shape()[0];
    check(w.shape() == [co, ci, 1, 1, 1] && b.len() == co, || {
        format!("conv1 weight {:?} does not fit input {:?}", w.shape(), x.shape())
    })?;
    let s = x.spatial_len();
    let mut out = Tensor::zeros([n, co, d, h, wd]);
    for i in 0..n {
        gemm(T::one(), Mat::new(w.data(), co, ci), Mat::new(x.sample(i), ci, s), T::zero(), out.sample_mut(i), s);
    }
    add_bias(&mut out, b);
    Ok(out)
}

pub fn conv1_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> ConvGrads<T> {
    let [n, ci, ..] = x.shape();
    let co = w.shape()[0];
    let s = x.spatial_len();
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for i in 0..n {
        gemm(T::one(), Mat::new(dy.sample(i), co, s), Mat::t(x.sample(i), s, ci), T::one(), dw.data_mut(), ci);
        if let Some(dx) = dx.as_mut() {
            gemm(T::one(), Mat::t(w.data(), ci, co), Mat::new(dy.sample(i), co, s), T::zero(), dx.sample_mut(i), s);
        }
    }
    ConvGrads {
        dx,
        dw,
        db: bias_grad(dy),
    }
}

/// Transposed convolution, kernel 2, stride 2. `w` is `[Ci, Co, 2, 2, 2]`.
pub fn conv_t2_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ci, d, h, wd] = x.shape();
    let co = w.shape()[1];
    check(w.shape() == [ci, co, 2, 2, 2] && b.len() == co, || {
        format!("transposed conv weight {:?} does not fit input {:?}", w.shape(), x.shape())
    })?;
    let s = x.spatial_len();
    let (oh, ow) = (2 * h, 2 * wd);
    let os = 8 * s;
    let mut out = Tensor::zeros([n, co, 2 * d, oh, ow]);
    let mut y8 = vec![T::zero(); co * 8 * s];
    for i in 0..n {
        gemm(T::one(), Mat::t(w.data(), co * 8, ci), Mat::new(x.sample(i), ci, s), T::zero(), &mut y8, s);
        let o = out.sample_mut(i);
        for c in 0..co {
            let bias = b.data()[c];
            for k in 0..8 {
                let (a, bb, cc) = (k / 4, (k / 2) % 2, k % 2);
                let src = &y8[(c * 8 + k) * s..(c * 8 + k + 1) * s];
                for z in 0..d {
                    for y in 0..h {
                        let row = c * os + (2 * z + a) * oh * ow + (2 * y + bb) * ow + cc;
                        let sr = &src[(z * h + y) * wd..(z * h + y + 1) * wd];
                        for (x, &v) in sr.iter().enumerate() {
                            o[row + 2 * x] = v + bias;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv_t2_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> ConvGrads<T> {
    let [n, ci, d, h, wd] = x.shape();
    let co = w.shape()[1];
    let s = x.spatial_len();
    let (oh, ow) = (2 * h, 2 * wd);
    let os = 8 * s;
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dy8 = vec![T::zero(); co * 8 * s];
    for i in 0..n {
        let g = dy.sample(i);
        for c in 0..co {
            for k in 0..8 {
                let (a, bb, cc) = (k / 4, (k / 2) % 2, k % 2);
                let dst = &mut dy8[(c * 8 + k) * s..(c * 8 + k + 1) * s];
                for z in 0..d {
                    for y in 0..h {
                        let row = c * os + (2 * z + a) * oh * ow + (2 * y + bb) * ow + cc;
                        let dr = &mut dst[(z * h + y) * wd..(z * h + y + 1) * wd];
                        for (x, v) in dr.iter_mut().enumerate() {
                            *v = g[row + 2 * x];
                        }
                    }
                }
            }
        }
        gemm(T::one(), Mat::new(x.sample(i), ci, s), Mat::t(&dy8, s, co * 8), T::one(), dw.data_mut(), co * 8);
        if let Some(dx) = dx.as_mut() {
            gemm(T::one(), Mat::new(w.data(), ci, co * 8), Mat::new(&dy8, co * 8, s), T::zero(), dx.sample_mut(i), s);
        }
    }
    ConvGrads {
        dx,
        dw,
        db: bias_grad(dy),
    }
}

/// Per-channel statistics saved for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub invstd: Vec<f64>,
    pub batch_stats: bool,
}

pub struct BnForward<T> {
    pub y: Tensor<T>,
    pub cache: BnCache,
    /// Unbiased batch variance, for the running-statistics update.
    pub var_unbiased: Vec<f64>,
}

fn channel_slices(shape: [usize; 5]) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> {
    let [n, c, ..] = shape;
    let s: usize = shape[2..].iter().product();
    (0..n).flat_map(move |i| (0..c).map(move |ch| (ch, (i * c + ch) * s..(i * c + ch + 1) * s)))
}

fn bn_apply<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, cache: &BnCache) -> Tensor<T> {
    let mut y = Tensor::zeros(x.shape());
    for (ch, r) in channel_slices(x.shape()) {
        let scale = cache.invstd[ch] * gamma.data()[ch].f64();
        let shift = beta.data()[ch].f64() - cache.mean[ch] * scale;
        let (scale, shift) = (T::of(scale), T::of(shift));
        for (o, &v) in y.data_mut()[r.clone()].iter_mut().zip(&x.data()[r]) {
            *o = v * scale + shift;
        }
    }
    y
}

/// Batch normalization using the statistics of `x` itself.
pub fn bn_forward_train<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> BnForward<T> {
    let c = x.c();
    let m = (x.n() * x.spatial_len()) as f64;
    let mut sum = vec![0.0f64; c];
    for (ch, r) in channel_slices(x.shape()) {
        sum[ch] += x.data()[r].iter().map(|v| v.f64()).sum::<f64>();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let mut sq = vec![0.0f64; c];
    for (ch, r) in channel_slices(x.shape()) {
        let mu = mean[ch];
        sq[ch] += x.data()[r].iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>();
    }
    let invstd = sq.iter().map(|s| 1.0 / (s / m + eps).sqrt()).collect();
    let var_unbiased = sq.iter().map(|s| if m > 1.0 { s / (m - 1.0) } else { 0.0 }).collect();
    let cache = BnCache {
        mean,
        invstd,
        batch_stats: true,
    };
    BnForward {
        y: bn_apply(x, gamma, beta, &cache),
        cache,
        var_unbiased,
    }
}

/// Batch normalization with fixed running statistics.
pub fn bn_forward_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, BnCache) {
    let cache = BnCache {
        mean: running_mean.data().iter().map(|v| v.f64()).collect(),
        invstd: running_var.data().iter().map(|v| 1.0 / (v.f64() + eps).sqrt()).collect(),
        batch_stats: false,
    };
    (bn_apply(x, gamma, beta, &cache), cache)
}

pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

pub fn bn_backward<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, dy: &Tensor<T>, cache: &BnCache) -> BnGrads<T> {
    let c = x.c();
    let m = (x.n() * x.spatial_len()) as f64;
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for (ch, r) in channel_slices(x.shape()) {
        let (mu, is) = (cache.mean[ch], cache.invstd[ch]);
        for (&g, &v) in dy.data()[r.clone()].iter().zip(&x.data()[r]) {
            let g = g.f64();
            sum_dy[ch] += g;
            sum_dy_xhat[ch] += g * (v.f64() - mu) * is;
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    for (ch, r) in channel_slices(x.shape()) {
        let (mu, is) = (cache.mean[ch], cache.invstd[ch]);
        let gs = gamma.data()[ch].f64() * is;
        let out = &mut dx.data_mut()[r.clone()];
        if cache.batch_stats {
            let (a, b) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
            for ((o, &g), &v) in out.iter_mut().zip(&dy.data()[r.clone()]).zip(&x.data()[r]) {
                let xhat = (v.f64() - mu) * is;
                *o = T::of(gs * (g.f64() - a - xhat * b));
            }
        } else {
            let gs = T::of(gs);
            for (o, &g) in out.iter_mut().zip(&dy.data()[r]) {
                *o = g * gs;
            }
        }
    }
    BnGrads {
        dx,
        dgamma: Tensor::vector(sum_dy_xhat.into_iter().map(T::of).collect()),
        dbeta: Tensor::vector(sum_dy.into_iter().map(T::of).collect()),
    }
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its output `y`.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(y.shape(), data)
}

pub fn add_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check(a.shape() == b.shape(), || format!("add of {:?} and {:?}", a.shape(), b.shape()))?;
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// 2×2×2 max pooling; returns the output and the flat input index of each
/// maximum (first maximum wins).
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, d, h, w] = x.shape();
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, od, oh, ow]);
    let mut arg = vec![0u32; n * c * od * oh * ow];
    let xd = x.data();
    let mut o = 0;
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + (2 * z * h + 2 * y) * w + 2 * xx;
                    let mut bv = xd[best];
                    for k in 1..8 {
                        let (a, b, cc) = (k / 4, (k / 2) % 2, k % 2);
                        let idx = base + ((2 * z + a) * h + 2 * y + b) * w + 2 * xx + cc;
                        if xd[idx] > bv {
                            bv = xd[idx];
                            best = idx;
                        }
                    }
                    out.data_mut()[o] = bv;
                    arg[o] = best as u32;
                    o += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(input_shape: [usize; 5], arg: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &g) in arg.iter().zip(dy.data()) {
        dx.data_mut()[i as usize] += g;
    }
    dx
}

pub fn concat_forward<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| NnError::Shape("concat of nothing".into()))?;
    let [n, _, d, h, w] = first.shape();
    for t in xs {
        check(t.n() == n && t.spatial() == [d, h, w], || {
            format!("concat of {:?} and {:?}", first.shape(), t.shape())
        })?;
    }
    let c: usize = xs.iter().map(|t| t.c()).sum();
    let mut data = Vec::with_capacity(n * c * d * h * w);
    for i in 0..n {
        for t in xs {
            data.extend_from_slice(t.sample(i));
        }
    }
    Ok(Tensor::from_vec([n, c, d, h, w], data))
}

pub fn concat_backward<T: Scalar>(channels: &[usize], dy: &Tensor<T>) -> Vec<Tensor<T>> {
    let [n, _, d, h, w] = dy.shape();
    let s = d * h * w;
    let mut out: Vec<Vec<T>> = channels.iter().map(|&c| Vec::with_capacity(n * c * s)).collect();
    for i in 0..n {
        let sample = dy.sample(i);
        let mut off = 0;
        for (buf, &c) in out.iter_mut().zip(channels) {
            buf.extend_from_slice(&sample[off..off + c * s]);
            off += c * s;
        }
    }
    out.into_iter()
        .zip(channels)
        .map(|(buf, &c)| Tensor::from_vec([n, c, d, h, w], buf))
        .collect()
}

/// In-plane crop `[y0, y0+hh) × [x0, x0+ww)` of every slice.
pub fn crop_forward<T: Scalar>(x: &Tensor<T>, y0: usize, x0: usize, hh: usize, ww: usize) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = x.shape();
    check(y0 + hh <= h && x0 + ww <= w && hh > 0 && ww > 0, || {
        format!("crop ({y0},{x0})+({hh},{ww}) outside {:?}", x.shape())
    })?;
    let mut data = Vec::with_capacity(n * c * d * hh * ww);
    for slice in x.data().chunks_exact(h * w) {
        for y in y0..y0 + hh {
            data.extend_from_slice(&slice[y * w + x0..y * w + x0 + ww]);
        }
    }
    Ok(Tensor::from_vec([n, c, d, hh, ww], data))
}

pub fn crop_backward<T: Scalar>(input_shape: [usize; 5], y0: usize, x0: usize, dy: &Tensor<T>) -> Tensor<T> {
    let [.., h, w] = input_shape;
    let [.., hh, ww] = dy.shape();
    let mut dx = Tensor::zeros(input_shape);
    for (dst, src) in dx.data_mut().chunks_exact_mut(h * w).zip(dy.data().chunks_exact(hh * ww)) {
        for y in 0..hh {
            dst[(y0 + y) * w + x0..(y0 + y) * w + x0 + ww].copy_from_slice(&src[y * ww..(y + 1) * ww]);
        }
    }
    dx
}

/// Linear interpolation taps `(i0, i1, frac)` for resizing `n_in → n_out`
/// with half-pixel centers; output `j` samples input `(j + ½)·n_in/n_out − ½`.
pub fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|j| {
            let src = ((j as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

fn resize_axis<T: Scalar>(x: &Tensor<T>, axis: usize, n_out: usize) -> Tensor<T> {
    let shape = x.shape();
    let n_in = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let taps = linear_taps(n_in, n_out);
    let mut out_shape = shape;
    out_shape[axis] = n_out;
    let mut out = Tensor::zeros(out_shape);
    let (src, dst) = (x.data(), out.data_mut());
    for o in 0..outer {
        for (j, &(i0, i1, f)) in taps.iter().enumerate() {
            let (a, b) = (T::of(1.0 - f), T::of(f));
            let d = &mut dst[(o * n_out + j) * inner..(o * n_out + j + 1) * inner];
            let s0 = &src[(o * n_in + i0) * inner..(o * n_in + i0 + 1) * inner];
            let s1 = &src[(o * n_in + i1) * inner..(o * n_in + i1 + 1) * inner];
            for ((v, &p), &q) in d.iter_mut().zip(s0).zip(s1) {
                *v = a * p + b * q;
            }
        }
    }
    out
}

fn resize_axis_backward<T: Scalar>(dy: &Tensor<T>, axis: usize, n_in: usize) -> Tensor<T> {
    let shape = dy.shape();
    let n_out = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let taps = linear_taps(n_in, n_out);
    let mut in_shape = shape;
    in_shape[axis] = n_in;
    let mut dx = Tensor::zeros(in_shape);
    let (g, dst) = (dy.data(), dx.data_mut());
    for o in 0..outer {
        for (j, &(i0, i1, f)) in taps.iter().enumerate() {
            let (a, b) = (T::of(1.0 - f), T::of(f));
            let gj = &g[(o * n_out + j) * inner..(o * n_out + j + 1) * inner];
            for (k, &v) in gj.iter().enumerate() {
                dst[(o * n_in + i0) * inner + k] += a * v;
                dst[(o * n_in + i1) * inner + k] += b * v;
            }
        }
    }
    dx
}

/// Separable linear resize of the spatial axes to `size`.
pub fn resize_forward<T: Scalar>(x: &Tensor<T>, size: [usize; 3]) -> Result<Tensor<T>> {
    check(size.iter().all(|&s| s > 0), || format!("resize to {size:?}"))?;
    let mut out = x.clone();
    for (k, &n) in size.iter().enumerate() {
        if out.shape()[2 + k] != n {
            out = resize_axis(&out, 2 + k, n);
        }
    }
    Ok(out)
}

pub fn resize_backward<T: Scalar>(input_shape: [usize; 5], dy: &Tensor<T>) -> Tensor<T> {
    let mut g = dy.clone();
    for k in (0..3).rev() {
        if g.shape()[2 + k] != input_shape[2 + k] {
            g = resize_axis_backward(&g, 2 + k, input_shape[2 + k]);
        }
    }
    g
}

/// Softmax across channels at every voxel.
pub fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, ..] = x.shape();
    let s = x.spatial_len();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n {
        let xs = x.sample(i);
        let os = out.sample_mut(i);
        for v in 0..s {
            let mut m = xs[v];
            for k in 1..c {
                m = m.max(xs[k * s + v]);
            }
            let mut sum = T::zero();
            for k in 0..c {
                let e = (xs[k * s + v] - m).exp();
                os[k * s + v] = e;
                sum += e;
            }
            for k in 0..c {
                os[k * s + v] /= sum;
            }
        }
    }
    out
}

/// Gradient of softmax given its output `y`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, ..] = y.shape();
    let s = y.spatial_len();
    let mut dx = Tensor::zeros(y.shape());
    for i in 0..n {
        let (ys, gs) = (y.sample(i), dy.sample(i));
        let ds = dx.sample_mut(i);
        for v in 0..s {
            let mut dot = T::zero();
            for k in 0..c {
                dot += ys[k * s + v] * gs[k * s + v];
            }
            for k in 0..c {
                ds[k * s + v] = ys[k * s + v] * (gs[k * s + v] - dot);
            }
        }
    }
    dx
}

/// Weighted cross-entropy, normalized by the total weight of the labels:
/// `Σ w[y]·(−log p_y) / Σ w[y]`. Returns the loss and its gradient with
/// respect to the logits.
pub fn weighted_ce<T: Scalar>(logits: &Tensor<T>, labels: &[u8], weights: &[f64]) -> Result<(f64, Tensor<T>)> {
    let [n, c, ..] = logits.shape();
    let s = logits.spatial_len();
    if labels.len() != n * s {
        return Err(NnError::Shape(format!(
            "{} labels for logits {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    if weights.len() != c {
        return Err(NnError::Shape(format!("{} class weights for {c} classes", weights.len())));
    }
    if let Some(i) = logits.data().iter().position(|v| !v.is_finite()) {
        return Err(NnError::NonFinite(format!("logit {i} is not finite")));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| usize::from(l) >= c) {
        return Err(NnError::Label { value: l, index: i, num_classes: c });
    }
    let total_w: f64 = labels.iter().map(|&l| weights[usize::from(l)]).sum();
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    let mut p = vec![0.0f64; c];
    for i in 0..n {
        let xs = logits.sample(i);
        let gs = grad.sample_mut(i);
        for v in 0..s {
            let y = usize::from(labels[i * s + v]);
            let m = (0..c).map(|k| xs[k * s + v].f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (k, pk) in p.iter_mut().enumerate() {
                *pk = (xs[k * s + v].f64() - m).exp();
                sum += *pk;
            }
            let w = weights[y] / total_w;
            loss += w * (sum.ln() - (xs[y * s + v].f64() - m));
            for (k, pk) in p.iter().enumerate() {
                let target = if k == y { 1.0 } else { 0.0 };
                gs[k * s + v] = T::of(w * (pk / sum - target));
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_tensor(shape: [usize; 5], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct-loop 3×3×3 convolution used as the reference.
    fn conv3_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let [n, ci, d, h, wd] = x.shape();
        let co = w.shape()[0];
        let mut out = Tensor::zeros([n, co, d, h, wd]);
        for i in 0..n {
            for o in 0..co {
                for z in 0..d {
                    for y in 0..h {
                        for xx in 0..wd {
                            let mut s = b.data()[o];
                            for c in 0..ci {
                                for kz in 0..3 {
                                    for ky in 0..3 {
                                        for kx in 0..3 {
                                            let (sz, sy, sx) = (z as isize + kz - 1, y as isize + ky - 1, xx as isize + kx - 1);
                                            if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= wd as isize {
                                                continue;
                                            }
                                            let xi = (((i * ci + c) * d + sz as usize) * h + sy as usize) * wd + sx as usize;
                                            let wi = (((o * ci + c) * 3 + kz as usize) * 3 + ky as usize) * 3 + kx as usize;
                                            s += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((i * co + o) * d + z) * h + y) * wd + xx] = s;
                        }
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
        }
    }

    /// Checks `<dy, f'(x) dx>` against a central difference of `<dy, f(x)>`.
    fn fd_check(f: impl Fn(&Tensor<f64>) -> Tensor<f64>, x: &Tensor<f64>, dx: &Tensor<f64>, dy: &Tensor<f64>) {
        let h = 1e-6;
        for i in (0..x.len()).step_by((x.len() / 13).max(1)) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fp: f64 = f(&xp).data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            let fm: f64 = f(&xm).data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            let num = (fp - fm) / (2.0 * h);
            let ana = dx.data()[i];
            assert!((num - ana).abs() < 1e-6 * (1.0 + num.abs()), "element {i}: fd {num} vs analytic {ana}");
        }
    }

    #[test]
    fn conv3_matches_naive_and_gradients() {
        let x = rand_tensor([2, 3, 4, 5, 6], 1);
        let w = rand_tensor([4, 3, 3, 3, 3], 2);
        let b = rand_tensor([4, 1, 1, 1, 1], 3);
        let y = conv3_forward(&x, &w, &b).unwrap();
        assert_close(&y, &conv3_naive(&x, &w, &b), 1e-12);
        let dy = rand_tensor(y.shape(), 4);
        let g = conv3_backward(&x, &w, &dy, true);
        fd_check(|x| conv3_forward(x, &w, &b).unwrap(), &x, g.dx.as_ref().unwrap(), &dy);
        fd_check(|w| conv3_forward(&x, w, &b).unwrap(), &w, &g.dw, &dy);
        fd_check(|b| conv3_forward(&x, &w, b).unwrap(), &b, &g.db, &dy);
    }

    #[test]
    fn conv1_and_transpose_gradients() {
        let x = rand_tensor([2, 3, 2, 3, 4], 5);
        let w = rand_tensor([5, 3, 1, 1, 1], 6);
        let b = rand_tensor([5, 1, 1, 1, 1], 7);
        let y = conv1_forward(&x, &w, &b).unwrap();
        let dy = rand_tensor(y.shape(), 8);
        let g = conv1_backward(&x, &w, &dy, true);
        fd_check(|x| conv1_forward(x, &w, &b).unwrap(), &x, g.dx.as_ref().unwrap(), &dy);
        fd_check(|w| conv1_forward(&x, w, &b).unwrap(), &w, &g.dw, &dy);

        let wt = rand_tensor([3, 2, 2, 2, 2], 9);
        let bt = rand_tensor([2, 1, 1, 1, 1], 10);
        let y = conv_t2_forward(&x, &wt, &bt).unwrap();
        assert_eq!(y.shape(), [2, 2, 4, 6, 8]);
        // Output voxel (1, 0, 1, 3, 5) comes from input (1, ·, 0, 1, 2) tap (1, 1, 1).
        let mut expect = bt.data()[0];
        for c in 0..3 {
            expect += x.data()[((3 + c) * 2) * 12 + 4 + 2] * wt.data()[(c * 2) * 8 + 7];
        }
        let got = y.data()[((2 * 4 + 1) * 6 + 3) * 8 + 5];
        assert!((got - expect).abs() < 1e-12);
        let dy = rand_tensor(y.shape(), 11);
        let g = conv_t2_backward(&x, &wt, &dy, true);
        fd_check(|x| conv_t2_forward(x, &wt, &bt).unwrap(), &x, g.dx.as_ref().unwrap(), &dy);
        fd_check(|w| conv_t2_forward(&x, w, &bt).unwrap(), &wt, &g.dw, &dy);
        fd_check(|b| conv_t2_forward(&x, &wt, b).unwrap(), &bt, &g.db, &dy);
    }

    #[test]
    fn single_conv1_parameter_count() {
        let w = Tensor::<f32>::zeros([8, 2, 1, 1, 1]);
        let b = Tensor::<f32>::zeros([8, 1, 1, 1, 1]);
        assert_eq!(w.len() + b.len(), 24);
    }

    #[test]
    fn batch_norm_gradients() {
        let x = rand_tensor([2, 3, 2, 2, 3], 12);
        let gamma = rand_tensor([3, 1, 1, 1, 1], 13);
        let beta = rand_tensor([3, 1, 1, 1, 1], 14);
        let f = bn_forward_train(&x, &gamma, &beta, 1e-5);
        for ch in 0..3 {
            let vals: Vec<f64> = channel_slices(x.shape())
                .filter(|(c, _)| *c == ch)
                .flat_map(|(_, r)| f.y.data()[r].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((mean - beta.data()[ch]).abs() < 1e-12);
        }
        let dy = rand_tensor(x.shape(), 15);
        let g = bn_backward(&x, &gamma, &dy, &f.cache);
        fd_check(|x| bn_forward_train(x, &gamma, &beta, 1e-5).y, &x, &g.dx, &dy);
        fd_check(|gm| bn_forward_train(&x, gm, &beta, 1e-5).y, &gamma, &g.dgamma, &dy);
        fd_check(|bt| bn_forward_train(&x, &gamma, bt, 1e-5).y, &beta, &g.dbeta, &dy);
        let rm = rand_tensor([3, 1, 1, 1, 1], 16);
        let rv = rand_tensor([3, 1, 1, 1, 1], 17).map(|v| v.abs() + 0.5);
        let (_, cache) = bn_forward_eval(&x, &gamma, &beta, &rm, &rv, 1e-5);
        let g = bn_backward(&x, &gamma, &dy, &cache);
        fd_check(|x| bn_forward_eval(x, &gamma, &beta, &rm, &rv, 1e-5).0, &x, &g.dx, &dy);
    }

    #[test]
    fn pool_concat_crop_resize_softmax_gradients() {
        let x = rand_tensor([2, 2, 4, 4, 6], 18);
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y.shape(), [2, 2, 2, 2, 3]);
        let dy = rand_tensor(y.shape(), 19);
        fd_check(|x| maxpool2_forward(x).0, &x, &maxpool2_backward(x.shape(), &arg, &dy), &dy);

        let a = rand_tensor([2, 1, 2, 2, 2], 20);
        let b = rand_tensor([2, 3, 2, 2, 2], 21);
        let cat = concat_forward(&[&a, &b]).unwrap();
        let parts = concat_backward(&[1, 3], &cat);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);

        let y = crop_forward(&x, 1, 2, 2, 3).unwrap();
        let dy = rand_tensor(y.shape(), 22);
        fd_check(|x| crop_forward(x, 1, 2, 2, 3).unwrap(), &x, &crop_backward(x.shape(), 1, 2, &dy), &dy);

        let y = resize_forward(&x, [8, 3, 12]).unwrap();
        let dy = rand_tensor(y.shape(), 23);
        fd_check(|x| resize_forward(x, [8, 3, 12]).unwrap(), &x, &resize_backward(x.shape(), &dy), &dy);

        let y = softmax_forward(&x);
        let dy = rand_tensor(y.shape(), 24);
        fd_check(softmax_forward, &x, &softmax_backward(&y, &dy), &dy);
    }

    #[test]
    fn resize_identity_and_constants() {
        let x = rand_tensor([1, 2, 3, 4, 5], 25);
        assert_eq!(resize_forward(&x, [3, 4, 5]).unwrap(), x);
        let c = Tensor::full([1, 1, 2, 4, 4], 0.37);
        let y = resize_forward(&c, [4, 8, 8]).unwrap();
        assert!(y.data().iter().all(|&v: &f64| (v - 0.37).abs() < 1e-15));
        // Half-pixel centers: upsampling [0, 1] by 2 gives [0, .25, .75, 1].
        let r = Tensor::from_vec([1, 1, 1, 1, 2], vec![0.0, 1.0]);
        assert_eq!(resize_forward(&r, [1, 1, 4]).unwrap().data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn weighted_ce_examples() {
        let uniform = Tensor::<f64>::zeros([1, 8, 1, 1, 1]);
        let mut w = vec![0.4; 8];
        w[0] = 0.1;
        let (loss, _) = weighted_ce(&uniform, &[0], &w).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
        assert!((0.1 * 8f64.ln() - 0.2079).abs() < 1e-4);

        let mut confident = vec![-30.0; 8];
        confident[3] = 30.0;
        let (loss, _) = weighted_ce(&Tensor::from_vec([1, 8, 1, 1, 1], confident), &[3], &w).unwrap();
        assert!(loss < 1e-20);

        let logits = rand_tensor([2, 8, 1, 2, 3], 26);
        let labels: Vec<u8> = (0..12).map(|i| (i * 5 % 8) as u8).collect();
        let ones = vec![1.0; 8];
        let (weighted, _) = weighted_ce(&logits, &labels, &ones).unwrap();
        let plain: f64 = (0..12)
            .map(|v| {
                let (i, s) = (v / 6, v % 6);
                let xs = logits.sample(i);
                let lse = (0..8).map(|k| xs[k * 6 + s].exp()).sum::<f64>().ln();
                lse - xs[labels[v] as usize * 6 + s]
            })
            .sum::<f64>()
            / 12.0;
        assert!((weighted - plain).abs() < 1e-12);

        let (_, grad) = weighted_ce(&logits, &labels, &w).unwrap();
        let h = 1e-6;
        for i in (0..logits.len()).step_by(7) {
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            let num = (weighted_ce(&p, &labels, &w).unwrap().0 - weighted_ce(&m, &labels, &w).unwrap().0) / (2.0 * h);
            assert!((num - grad.data()[i]).abs() < 1e-8);
        }

        let bad = Tensor::from_vec([1, 2, 1, 1, 1], vec![f64::NAN, 0.0]);
        assert!(matches!(weighted_ce(&bad, &[0], &[1.0, 1.0]), Err(NnError::NonFinite(_))));
        assert!(matches!(weighted_ce(&uniform, &[8], &w), Err(NnError::Label { .. })));
    }
}
