//! im2col-based 2-D cross-correlation kernels.

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    /// Output size uses floor division, so `H + 2 pad >= kh` is the only requirement.
    pub fn new(
        (c_in, h, w): (usize, usize, usize),
        (c_out, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_spatial(&self) -> usize {
        self.h_out * self.w_out
    }

    /// A 1x1 stride-1 unpadded convolution reads its input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Target number of output pixels per im2col band; keeps the column buffer cache-resident.
const BAND_PIXELS: usize = 2048;

impl ConvGeometry {
    /// Output columns `lo..hi` whose kernel column `b` lands inside the image.
    fn valid_cols(&self, b: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(b).div_ceil(self.stride).min(self.w_out);
        // ix = ox*stride + b - pad < w  <=>  ox < (w + pad - b) / stride, rounded up
        let hi = (self.w + self.pad).saturating_sub(b).div_ceil(self.stride).min(self.w_out).max(lo);
        (lo, hi)
    }

    fn band_rows(&self) -> usize {
        (BAND_PIXELS / self.w_out).clamp(1, self.h_out)
    }
}

/// Unfolds output rows `oy0..oy1` of one image `[c_in, h, w]` into
/// `cols: [c_in*kh*kw, (oy1-oy0)*w_out]`.
pub(crate) fn im2col<T: Real>(g: &ConvGeometry, image: &[T], oy0: usize, oy1: usize, cols: &mut [T]) {
    let band = (oy1 - oy0) * g.w_out;
    for ci in 0..g.c_in {
        let plane = &image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for a in 0..g.kh {
            for b in 0..g.kw {
                let row = ((ci * g.kh + a) * g.kw + b) * band;
                let dst = &mut cols[row..row + band];
                for oy in oy0..oy1 {
                    let out = &mut dst[(oy - oy0) * g.w_out..(oy - oy0 + 1) * g.w_out];
                    let iy = (oy * g.stride + a) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // Valid columns form one contiguous run.
                        let lo = g.pad.saturating_sub(b).min(g.w_out);
                        let hi = (g.w + g.pad).saturating_sub(b).min(g.w_out).max(lo);
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        let start = lo + b - g.pad;
                        out[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        let (lo, hi) = g.valid_cols(b);
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        let start = lo * g.stride + b - g.pad;
                        for (o, &v) in out[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds band column gradients back onto the image.
pub(crate) fn col2im_add<T: Real>(g: &ConvGeometry, cols: &[T], oy0: usize, oy1: usize, image: &mut [T]) {
    let band = (oy1 - oy0) * g.w_out;
    for ci in 0..g.c_in {
        let plane = &mut image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for a in 0..g.kh {
            for b in 0..g.kw {
                let row = ((ci * g.kh + a) * g.kw + b) * band;
                let src = &cols[row..row + band];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + a) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let vals = &src[(oy - oy0) * g.w_out..(oy - oy0 + 1) * g.w_out];
                    let (lo, hi) = g.valid_cols(b);
                    let start = lo * g.stride + b - g.pad;
                    for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(&vals[lo..hi]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(g: &ConvGeometry, n: usize, input: &[T], kernel: &[T]) -> Vec<T> {
    let in_len = g.c_in * g.h * g.w;
    let spatial = g.out_spatial();
    let out_len = g.c_out * spatial;
    let plen = g.patch_len();
    let mut out = vec![T::zero(); n * out_len];
    let rows = g.band_rows();
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); plen * rows * g.w_out]
    };
    for i in 0..n {
        let image = &input[i * in_len..(i + 1) * in_len];
        let out_img = &mut out[i * out_len..(i + 1) * out_len];
        if g.is_pointwise() {
            T::gemm(
                g.c_out,
                plen,
                spatial,
                T::one(),
                kernel,
                (plen as isize, 1),
                image,
                (spatial as isize, 1),
                T::zero(),
                out_img,
                spatial as isize,
            );
            continue;
        }
        for oy0 in (0..g.h_out).step_by(rows) {
            let oy1 = (oy0 + rows).min(g.h_out);
            let band = (oy1 - oy0) * g.w_out;
            im2col(g, image, oy0, oy1, &mut cols);
            T::gemm(
                g.c_out,
                plen,
                band,
                T::one(),
                kernel,
                (plen as isize, 1),
                &cols[..plen * band],
                (band as isize, 1),
                T::zero(),
                &mut out_img[oy0 * g.w_out..],
                spatial as isize,
            );
        }
    }
    out
}

/// Returns `(d_input, d_kernel)`; either may be skipped.
pub(crate) fn backward<T: Real>(
    g: &ConvGeometry,
    n: usize,
    input: &[T],
    kernel: &[T],
    d_out: &[T],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_len = g.c_in * g.h * g.w;
    let spatial = g.out_spatial();
    let out_len = g.c_out * spatial;
    let plen = g.patch_len();
    let mut d_input = want_input.then(|| vec![T::zero(); n * in_len]);
    let mut d_kernel = want_kernel.then(|| vec![T::zero(); g.c_out * plen]);

    if g.is_pointwise() {
        for i in 0..n {
            let image = &input[i * in_len..(i + 1) * in_len];
            let dy = &d_out[i * out_len..(i + 1) * out_len];
            if let Some(dk) = d_kernel.as_mut() {
                // dK += dY [c_out, S] * X^T [S, c_in]
                T::gemm(
                    g.c_out,
                    spatial,
                    plen,
                    T::one(),
                    dy,
                    (spatial as isize, 1),
                    image,
                    (1, spatial as isize),
                    T::one(),
                    dk,
                    plen as isize,
                );
            }
            if let Some(dx) = d_input.as_mut() {
                // dX = K^T [c_in, c_out] * dY [c_out, S]
                T::gemm(
                    plen,
                    g.c_out,
                    spatial,
                    T::one(),
                    kernel,
                    (1, plen as isize),
                    dy,
                    (spatial as isize, 1),
                    T::zero(),
                    &mut dx[i * in_len..(i + 1) * in_len],
                    spatial as isize,
                );
            }
        }
        return (d_input, d_kernel);
    }

    let rows = g.band_rows();
    let mut cols = vec![T::zero(); if want_kernel { plen * rows * g.w_out } else { 0 }];
    let mut d_cols = vec![T::zero(); if want_input { plen * rows * g.w_out } else { 0 }];
    for i in 0..n {
        let image = &input[i * in_len..(i + 1) * in_len];
        let dy = &d_out[i * out_len..(i + 1) * out_len];
        for oy0 in (0..g.h_out).step_by(rows) {
            let oy1 = (oy0 + rows).min(g.h_out);
            let band = (oy1 - oy0) * g.w_out;
            let dy_band = &dy[oy0 * g.w_out..];
            if let Some(dk) = d_kernel.as_mut() {
                im2col(g, image, oy0, oy1, &mut cols);
                // dK += dY_band [c_out, band] * cols^T [band, plen]
                T::gemm(
                    g.c_out,
                    band,
                    plen,
                    T::one(),
                    dy_band,
                    (spatial as isize, 1),
                    &cols[..plen * band],
                    (1, band as isize),
                    T::one(),
                    dk,
                    plen as isize,
                );
            }
            if let Some(dx) = d_input.as_mut() {
                // dcols = K^T [plen, c_out] * dY_band [c_out, band]
                T::gemm(
                    plen,
                    g.c_out,
                    band,
                    T::one(),
                    kernel,
                    (1, plen as isize),
                    dy_band,
                    (spatial as isize, 1),
                    T::zero(),
                    &mut d_cols[..plen * band],
                    band as isize,
                );
                col2im_add(g, &d_cols[..plen * band], oy0, oy1, &mut dx[i * in_len..(i + 1) * in_len]);
            }
        }
    }
    (d_input, d_kernel)
}
