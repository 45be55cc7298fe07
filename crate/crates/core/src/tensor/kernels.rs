//! Slice-level forward and backward kernels for the network operators.
//!
//! All spatial kernels take `[N, C, H, W]` row-major buffers. Convolution is
//! cross-correlation with zero "same" padding and stride 1.

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn count(&self) -> usize {
        self.n * self.sample()
    }
}

/// Unfolds one `[C, H, W]` sample into a `[C*k*k, H*W]` column matrix.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                // valid output columns satisfy 0 <= x + kx - pad < w
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let yy = y as isize + ky as isize - pad as isize;
                    if yy < 0 || yy >= h as isize || x_lo >= x_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[yy as usize * w..(yy as usize + 1) * w];
                    out[..x_lo].fill(T::zero());
                    let shift = kx as isize - pad as isize;
                    for xo in x_lo..x_hi {
                        out[xo] = src[(xo as isize + shift) as usize];
                    }
                    out[x_hi..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto a `[C, H, W]` sample.
fn col2im_add<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                let shift = kx as isize - pad as isize;
                for y in 0..h {
                    let yy = y as isize + ky as isize - pad as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[yy as usize * w..(yy as usize + 1) * w];
                    let row_src = &src[y * w..(y + 1) * w];
                    for xo in x_lo..x_hi {
                        dst[(xo as isize + shift) as usize] += row_src[xo];
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 cross-correlation. `weight` is `[C_out, C_in, k, k]`.
pub fn conv2d_forward<T: Real>(
    x: &[T],
    dims: Dims4,
    weight: &[T],
    c_out: usize,
    k: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let hw = dims.plane();
    let kk = dims.c * k * k;
    let mut out = vec![T::zero(); dims.n * c_out * hw];
    let mut col = vec![T::zero(); kk * hw];
    for n in 0..dims.n {
        let xs = &x[n * dims.sample()..(n + 1) * dims.sample()];
        let ys = &mut out[n * c_out * hw..(n + 1) * c_out * hw];
        let b_mat: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, dims.c, dims.h, dims.w, k, &mut col);
            &col
        };
        T::gemm(
            c_out,
            kk,
            hw,
            T::one(),
            weight,
            kk as isize,
            1,
            b_mat,
            hw as isize,
            1,
            T::zero(),
            ys,
            hw as isize,
            1,
        );
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut ys[co * hw..(co + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]. Returns `(d_input, d_weight, d_bias)`; each is
/// computed only when requested.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    dims: Dims4,
    weight: &[T],
    c_out: usize,
    k: usize,
    dy: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let hw = dims.plane();
    let kk = dims.c * k * k;
    let mut dx = need_input.then(|| vec![T::zero(); dims.count()]);
    let mut dw = need_weight.then(|| vec![T::zero(); c_out * kk]);
    let db = need_bias.then(|| {
        let mut db = vec![T::zero(); c_out];
        for n in 0..dims.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let start = (n * c_out + co) * hw;
                *acc += dy[start..start + hw].iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        db
    });
    let mut col = vec![T::zero(); kk * hw];
    let mut dcol = vec![T::zero(); kk * hw];
    for n in 0..dims.n {
        let xs = &x[n * dims.sample()..(n + 1) * dims.sample()];
        let dys = &dy[n * c_out * hw..(n + 1) * c_out * hw];
        if let Some(dw) = dw.as_mut() {
            let b_mat: &[T] = if k == 1 {
                xs
            } else {
                im2col(xs, dims.c, dims.h, dims.w, k, &mut col);
                &col
            };
            // dW[c_out, kk] += dY[c_out, hw] @ col^T
            T::gemm(
                c_out,
                hw,
                kk,
                T::one(),
                dys,
                hw as isize,
                1,
                b_mat,
                1,
                hw as isize,
                T::one(),
                dw,
                kk as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[n * dims.sample()..(n + 1) * dims.sample()];
            if k == 1 {
                T::gemm(
                    kk,
                    c_out,
                    hw,
                    T::one(),
                    weight,
                    1,
                    kk as isize,
                    dys,
                    hw as isize,
                    1,
                    T::zero(),
                    dxs,
                    hw as isize,
                    1,
                );
            } else {
                // dcol[kk, hw] = W^T @ dY
                T::gemm(
                    kk,
                    c_out,
                    hw,
                    T::one(),
                    weight,
                    1,
                    kk as isize,
                    dys,
                    hw as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                    hw as isize,
                    1,
                );
                col2im_add(&dcol, dims.c, dims.h, dims.w, k, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// 2x2 non-overlapping max pooling. Returns the pooled values and, per output, the
/// flat input index that won (first in row-major order on ties).
pub fn max_pool2_forward<T: Real>(x: &[T], dims: Dims4) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (dims.h / 2, dims.w / 2);
    let mut out = Vec::with_capacity(dims.n * dims.c * ho * wo);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..dims.n * dims.c {
        let base = plane * dims.plane();
        for y in 0..ho {
            for xo in 0..wo {
                let mut best_idx = base + 2 * y * dims.w + 2 * xo;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * dims.w + 2 * xo + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Real>(dy: &[T], argmax: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &idx) in dy.iter().zip(argmax) {
        dx[idx as usize] += g;
    }
    dx
}

pub fn upsample_nearest_forward<T: Real>(x: &[T], dims: Dims4) -> Vec<T> {
    let (ho, wo) = (dims.h * 2, dims.w * 2);
    let mut out = vec![T::zero(); dims.n * dims.c * ho * wo];
    for plane in 0..dims.n * dims.c {
        let src = &x[plane * dims.plane()..(plane + 1) * dims.plane()];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..ho {
            let srow = &src[(y / 2) * dims.w..(y / 2 + 1) * dims.w];
            let drow = &mut dst[y * wo..(y + 1) * wo];
            for (xo, v) in drow.iter_mut().enumerate() {
                *v = srow[xo / 2];
            }
        }
    }
    out
}

/// `dims` describes the (smaller) input.
pub fn upsample_nearest_backward<T: Real>(dy: &[T], dims: Dims4) -> Vec<T> {
    let (ho, wo) = (dims.h * 2, dims.w * 2);
    let mut dx = vec![T::zero(); dims.count()];
    for plane in 0..dims.n * dims.c {
        let src = &dy[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx[plane * dims.plane()..(plane + 1) * dims.plane()];
        for y in 0..ho {
            for xo in 0..wo {
                dst[(y / 2) * dims.w + xo / 2] += src[y * wo + xo];
            }
        }
    }
    dx
}

/// Per-axis source taps for 2x bilinear upsampling with the align-corners=false
/// convention: `src = max(0, (dst + 0.5) / 2 - 0.5)`.
fn bilinear_taps(input: usize) -> Vec<(usize, usize, f64)> {
    (0..input * 2)
        .map(|d| {
            let src = ((d as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear_forward<T: Real>(x: &[T], dims: Dims4) -> Vec<T> {
    let (ho, wo) = (dims.h * 2, dims.w * 2);
    let ty = bilinear_taps(dims.h);
    let tx = bilinear_taps(dims.w);
    let mut out = vec![T::zero(); dims.n * dims.c * ho * wo];
    for plane in 0..dims.n * dims.c {
        let src = &x[plane * dims.plane()..(plane + 1) * dims.plane()];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            for (xo, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let top = src[y0 * dims.w + x0] * (T::one() - lx) + src[y0 * dims.w + x1] * lx;
                let bot = src[y1 * dims.w + x0] * (T::one() - lx) + src[y1 * dims.w + x1] * lx;
                dst[y * wo + xo] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward<T: Real>(dy: &[T], dims: Dims4) -> Vec<T> {
    let (ho, wo) = (dims.h * 2, dims.w * 2);
    let ty = bilinear_taps(dims.h);
    let tx = bilinear_taps(dims.w);
    let mut dx = vec![T::zero(); dims.count()];
    for plane in 0..dims.n * dims.c {
        let src = &dy[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx[plane * dims.plane()..(plane + 1) * dims.plane()];
        for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            for (xo, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let g = src[y * wo + xo];
                let gt = g * (T::one() - ly);
                let gb = g * ly;
                dst[y0 * dims.w + x0] += gt * (T::one() - lx);
                dst[y0 * dims.w + x1] += gt * lx;
                dst[y1 * dims.w + x0] += gb * (T::one() - lx);
                dst[y1 * dims.w + x1] += gb * lx;
            }
        }
    }
    dx
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(a: &[T], ca: usize, b: &[T], cb: usize, n: usize, hw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * (ca + cb) * hw);
    for s in 0..n {
        out.extend_from_slice(&a[s * ca * hw..(s + 1) * ca * hw]);
        out.extend_from_slice(&b[s * cb * hw..(s + 1) * cb * hw]);
    }
    out
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels<T: Real>(g: &[T], ca: usize, cb: usize, n: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let mut ga = Vec::with_capacity(n * ca * hw);
    let mut gb = Vec::with_capacity(n * cb * hw);
    let stride = (ca + cb) * hw;
    for s in 0..n {
        ga.extend_from_slice(&g[s * stride..s * stride + ca * hw]);
        gb.extend_from_slice(&g[s * stride + ca * hw..(s + 1) * stride]);
    }
    (ga, gb)
}

/// Per-channel mean and biased variance over `groups` contiguous blocks of samples.
/// Output is indexed `[group * C + channel]`.
pub fn channel_moments<T: Real>(x: &[T], dims: Dims4, groups: usize) -> (Vec<f64>, Vec<f64>) {
    let per_group = dims.n / groups;
    let hw = dims.plane();
    let m = (per_group * hw) as f64;
    let mut mean = vec![0.0; groups * dims.c];
    let mut var = vec![0.0; groups * dims.c];
    for g in 0..groups {
        for c in 0..dims.c {
            let mut s = 0.0;
            for n in g * per_group..(g + 1) * per_group {
                let base = (n * dims.c + c) * hw;
                s += x[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mu = s / m;
            let mut q = 0.0;
            for n in g * per_group..(g + 1) * per_group {
                let base = (n * dims.c + c) * hw;
                q += x[base..base + hw]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mu;
                        d * d
                    })
                    .sum::<f64>();
            }
            mean[g * dims.c + c] = mu;
            var[g * dims.c + c] = q / m;
        }
    }
    (mean, var)
}
