//! Slice-level numeric kernels shared by forward and backward rules.
//!
//! All loops accumulate in a fixed sequential order so results are
//! bit-reproducible across runs.

use super::Element;

/// `a[m×k] · b[k×n]`, accumulated into `out[m×n]`.
pub fn matmul_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `aᵀ · b` for `a[k×m]`, `b[k×n]`, accumulated into `out[m×n]`.
pub fn matmul_tn_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`, accumulated into `out[m×n]`.
pub fn matmul_nt_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose2(b, n, k);
    matmul_acc(a, &bt, out, m, k, n);
}

/// Transposes a row-major `[r×c]` matrix.
pub fn transpose2<T: Element>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Geometry of a 2-D convolution over an `[H, W, C]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        h: usize,
        w: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

/// Unfolds `x[H,W,C]` into `[Ho·Wo, kh·kw·C]` with zero padding.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.ho * g.wo * plen];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * plen..(oy * g.wo + ox + 1) * plen];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.kw + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds columns back onto `dx[H,W,C]`.
pub fn col2im_acc<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plen = g.patch_len();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * plen..(oy * g.wo + ox + 1) * plen];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.kw + kx) * g.cin;
                    for c in 0..g.cin {
                        dx[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}

/// Scatter for a transposed convolution without padding.
///
/// `z` is `[H·W, k·k·Cout]` (one kernel-sized block per input pixel);
/// output is `[(H−1)s+k, (W−1)s+k, Cout]`.
pub fn deconv_scatter<T: Element>(
    z: &[T],
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    cout: usize,
) -> Vec<T> {
    let (ho, wo) = ((h - 1) * s + k, (w - 1) * s + k);
    let mut out = vec![T::zero(); ho * wo * cout];
    let blk = k * k * cout;
    for iy in 0..h {
        for ix in 0..w {
            let zb = &z[(iy * w + ix) * blk..(iy * w + ix + 1) * blk];
            for ky in 0..k {
                for kx in 0..k {
                    let dst = ((iy * s + ky) * wo + ix * s + kx) * cout;
                    let src = (ky * k + kx) * cout;
                    for c in 0..cout {
                        out[dst + c] += zb[src + c];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`deconv_scatter`].
pub fn deconv_gather<T: Element>(
    dy: &[T],
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    cout: usize,
) -> Vec<T> {
    let wo = (w - 1) * s + k;
    let blk = k * k * cout;
    let mut z = vec![T::zero(); h * w * blk];
    for iy in 0..h {
        for ix in 0..w {
            let zb = &mut z[(iy * w + ix) * blk..(iy * w + ix + 1) * blk];
            for ky in 0..k {
                for kx in 0..k {
                    let src = ((iy * s + ky) * wo + ix * s + kx) * cout;
                    let dst = (ky * k + kx) * cout;
                    zb[dst..dst + cout].copy_from_slice(&dy[src..src + cout]);
                }
            }
        }
    }
    z
}

/// Source index and weight pairs for align-corners bilinear resampling
/// along one axis.
pub fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let pos = if n_out == 1 || n_in == 1 {
                0.0
            } else {
                o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub fn resize_bilinear<T: Element>(
    x: &[T],
    h: usize,
    w: usize,
    c: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut out = vec![T::zero(); ho * wo * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        let (fy, gy) = (T::of(fy), T::of(1.0 - fy));
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let (fx, gx) = (T::of(fx), T::of(1.0 - fx));
            let o = (oy * wo + ox) * c;
            let (a, b) = ((y0 * w + x0) * c, (y0 * w + x1) * c);
            let (d, e) = ((y1 * w + x0) * c, (y1 * w + x1) * c);
            for ch in 0..c {
                out[o + ch] = gy * (gx * x[a + ch] + fx * x[b + ch])
                    + fy * (gx * x[d + ch] + fx * x[e + ch]);
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Element>(
    dy: &[T],
    h: usize,
    w: usize,
    c: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut dx = vec![T::zero(); h * w * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        let (fy, gy) = (T::of(fy), T::of(1.0 - fy));
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let (fx, gx) = (T::of(fx), T::of(1.0 - fx));
            let o = (oy * wo + ox) * c;
            let (a, b) = ((y0 * w + x0) * c, (y0 * w + x1) * c);
            let (d, e) = ((y1 * w + x0) * c, (y1 * w + x1) * c);
            for ch in 0..c {
                let g = dy[o + ch];
                dx[a + ch] += gy * gx * g;
                dx[b + ch] += gy * fx * g;
                dx[d + ch] += fy * gx * g;
                dx[e + ch] += fy * fx * g;
            }
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Element>(x: T) -> T {
    let (k, c, half) = (T::of(GELU_K), T::of(GELU_C), T::of(0.5));
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Element>(x: T) -> T {
    let (k, c, half) = (T::of(GELU_K), T::of(GELU_C), T::of(0.5));
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

/// Row-wise softmax over the last axis of length `n`.
pub fn softmax_rows<T: Element>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xr, or) in x.chunks(n).zip(out.chunks_mut(n)) {
        let m = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in or.iter_mut() {
            *o = *o / z;
        }
    }
    out
}

/// Per-row normalisation statistics: (normalised values, 1/σ per row).
pub fn layernorm_rows<T: Element>(x: &[T], n: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / n);
    let nf = T::of(n as f64);
    for (xr, or) in x.chunks(n).zip(out.chunks_mut(n)) {
        let mean = xr.iter().copied().sum::<T>() / nf;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let r = T::one() / (var + T::of(eps)).sqrt();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (out, rstd)
}

/// Forward difference along `axis` (0 = rows/v, 1 = columns/u) of an
/// `[H, W, C]` map; the last row or column is zero.
pub fn spatial_diff<T: Element>(x: &[T], h: usize, w: usize, c: usize, axis: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let (step, lim_h, lim_w) = if axis == 0 {
        (w * c, h.saturating_sub(1), w)
    } else {
        (c, h, w.saturating_sub(1))
    };
    for i in 0..lim_h {
        for j in 0..lim_w {
            let o = (i * w + j) * c;
            for ch in 0..c {
                out[o + ch] = x[o + ch + step] - x[o + ch];
            }
        }
    }
    out
}

pub fn spatial_diff_backward<T: Element>(
    dy: &[T],
    h: usize,
    w: usize,
    c: usize,
    axis: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len()];
    let (step, lim_h, lim_w) = if axis == 0 {
        (w * c, h.saturating_sub(1), w)
    } else {
        (c, h, w.saturating_sub(1))
    };
    for i in 0..lim_h {
        for j in 0..lim_w {
            let o = (i * w + j) * c;
            for ch in 0..c {
                let g = dy[o + ch];
                dx[o + ch + step] += g;
                dx[o + ch] -= g;
            }
        }
    }
    dx
}
