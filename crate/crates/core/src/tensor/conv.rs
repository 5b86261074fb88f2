//! im2col/GEMM kernels for 2-D convolution and its adjoint.
//!
//! Kernels are always laid out `[feature_channels, image_channels, kh, kw]`.
//! For `conv2d` the image side is the input and the feature side the output;
//! `conv_transpose2d` swaps the two, which makes it the exact adjoint.

/// `floor((input + 2·pad − kernel) / stride) + 1`, or `None` if the kernel
/// does not fit.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// `(input − 1)·stride − 2·pad + kernel`, or `None` if non-positive.
pub fn conv_transpose2d_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    if stride == 0 || input == 0 {
        return None;
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * pad {
        return None;
    }
    Some(full - 2 * pad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    /// Image-side channels and spatial size.
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// Feature-side channels and spatial size.
    pub o: usize,
    pub oh: usize,
    pub ow: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn columns(&self) -> usize {
        self.batch * self.positions()
    }

    pub fn image_len(&self) -> usize {
        self.batch * self.c * self.h * self.w
    }

    pub fn feature_len(&self) -> usize {
        self.batch * self.o * self.positions()
    }

    pub fn kernel_len(&self) -> usize {
        self.o * self.patch()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = alpha·a·b + beta·c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slices are at least as long as the strided extents used here.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output columns `[lo, hi)` whose input coordinate `o·stride + k − pad`
/// falls inside `[0, size)`.
fn valid_range(size: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if size + pad <= k {
        return (0, 0);
    }
    let hi = ((size - 1 + pad - k) / stride + 1).min(out);
    (lo.min(hi), hi)
}

/// Unfolds image-side patches into a `(c·kh·kw) × (batch·oh·ow)` matrix.
fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols = g.columns();
    let p = g.positions();
    if g.is_pointwise() {
        return feature_to_rows(x, g.batch, g.c, p);
    }
    let mut col = vec![0.0f32; g.patch() * cols];
    let s = g.stride;
    for ki in 0..g.kh {
        let (y_lo, y_hi) = valid_range(g.h, g.oh, ki, s, g.pad);
        for kj in 0..g.kw {
            let (x_lo, x_hi) = valid_range(g.w, g.ow, kj, s, g.pad);
            if x_lo >= x_hi {
                continue;
            }
            let ix0 = x_lo * s + kj - g.pad;
            let span = x_hi - x_lo;
            for ci in 0..g.c {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for n in 0..g.batch {
                    let src = &x[(n * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[n * p..(n + 1) * p];
                    for oy in y_lo..y_hi {
                        let iy = oy * s + ki - g.pad;
                        let src_row = &src[iy * g.w + ix0..];
                        let d = &mut dst[oy * g.ow + x_lo..][..span];
                        if s == 1 {
                            d.copy_from_slice(&src_row[..span]);
                        } else {
                            for (dv, sv) in d.iter_mut().zip(src_row.iter().step_by(s)) {
                                *dv = *sv;
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im(col: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let cols = g.columns();
    let p = g.positions();
    if g.is_pointwise() {
        rows_to_feature_acc(col, g.batch, g.c, p, x);
        return;
    }
    let s = g.stride;
    for ki in 0..g.kh {
        let (y_lo, y_hi) = valid_range(g.h, g.oh, ki, s, g.pad);
        for kj in 0..g.kw {
            let (x_lo, x_hi) = valid_range(g.w, g.ow, kj, s, g.pad);
            if x_lo >= x_hi {
                continue;
            }
            let ix0 = x_lo * s + kj - g.pad;
            let span = x_hi - x_lo;
            for ci in 0..g.c {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..g.batch {
                    let dst = &mut x[(n * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[n * p..(n + 1) * p];
                    for oy in y_lo..y_hi {
                        let iy = oy * s + ki - g.pad;
                        let sv = &src[oy * g.ow + x_lo..][..span];
                        let dst_row = &mut dst[iy * g.w + ix0..];
                        for (dv, v) in dst_row.iter_mut().step_by(s).zip(sv) {
                            *dv += *v;
                        }
                    }
                }
            }
        }
    }
}

/// `[batch, ch, p]` → `[ch, batch·p]`.
fn feature_to_rows(f: &[f32], batch: usize, ch: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; f.len()];
    feature_to_rows_into(f, batch, ch, p, &mut out);
    out
}

fn feature_to_rows_into(f: &[f32], batch: usize, ch: usize, p: usize, out: &mut [f32]) {
    for n in 0..batch {
        for c in 0..ch {
            out[c * batch * p + n * p..][..p].copy_from_slice(&f[(n * ch + c) * p..][..p]);
        }
    }
}

/// `[ch, batch·p]` → `[batch, ch, p]`, accumulating into `out`.
fn rows_to_feature_acc(r: &[f32], batch: usize, ch: usize, p: usize, out: &mut [f32]) {
    for n in 0..batch {
        for c in 0..ch {
            let src = &r[c * batch * p + n * p..][..p];
            let dst = &mut out[(n * ch + c) * p..][..p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

/// Target size of one unfolded chunk, chosen to stay cache resident.
const CHUNK_FLOATS: usize = 1 << 17;

/// Splits the batch into chunks whose unfolded image fits [`CHUNK_FLOATS`].
fn chunks(g: &ConvGeom) -> impl Iterator<Item = (usize, ConvGeom)> {
    let per = (g.patch() * g.positions()).max(1);
    let step = (CHUNK_FLOATS / per).clamp(1, g.batch.max(1));
    let g = *g;
    (0..g.batch).step_by(step).map(move |start| {
        let mut sub = g;
        sub.batch = step.min(g.batch - start);
        (start, sub)
    })
}

/// Image side → feature side (`conv2d` forward, and the input gradient of
/// `conv_transpose2d`).
pub(crate) fn conv_forward(x: &[f32], kernel: &[f32], g: &ConvGeom) -> Vec<f32> {
    image_pass(x, kernel, None, g).0
}

/// One unfolding of `image` serving both the feature-side product and,
/// when `feature` is given, the kernel gradient `Σ feature_rows · colᵀ`.
pub(crate) fn image_pass(
    image: &[f32],
    kernel: &[f32],
    feature: Option<&[f32]>,
    g: &ConvGeom,
) -> (Vec<f32>, Vec<f32>) {
    let mut y = vec![0.0f32; g.feature_len()];
    let mut dk = vec![0.0f32; if feature.is_some() { g.kernel_len() } else { 0 }];
    let k = g.patch();
    let img = g.c * g.h * g.w;
    let feat = g.o * g.positions();
    for (start, sub) in chunks(g) {
        let col = im2col(&image[start * img..(start + sub.batch) * img], &sub);
        let cols = sub.columns();
        let mut rows = vec![0.0f32; g.o * cols];
        gemm(g.o, k, cols, kernel, (k as isize, 1), &col, (cols as isize, 1), 0.0, &mut rows);
        rows_to_feature_acc(
            &rows,
            sub.batch,
            g.o,
            g.positions(),
            &mut y[start * feat..(start + sub.batch) * feat],
        );
        if let Some(f) = feature {
            feature_to_rows_into(
                &f[start * feat..(start + sub.batch) * feat],
                sub.batch,
                g.o,
                g.positions(),
                &mut rows,
            );
            gemm(g.o, cols, k, &rows, (cols as isize, 1), &col, (1, cols as isize), 1.0, &mut dk);
        }
    }
    (y, dk)
}

/// Feature side → image side (`conv_transpose2d` forward, and the input
/// gradient of `conv2d`).
pub(crate) fn conv_adjoint(y: &[f32], kernel: &[f32], g: &ConvGeom) -> Vec<f32> {
    let mut x = vec![0.0f32; g.image_len()];
    let k = g.patch();
    let img = g.c * g.h * g.w;
    let feat = g.o * g.positions();
    for (start, sub) in chunks(g) {
        let cols = sub.columns();
        let mut rows = vec![0.0f32; g.o * cols];
        feature_to_rows_into(
            &y[start * feat..(start + sub.batch) * feat],
            sub.batch,
            g.o,
            g.positions(),
            &mut rows,
        );
        let mut col = vec![0.0f32; k * cols];
        // kernelᵀ: (k × o), stored as o × k row-major.
        gemm(k, g.o, cols, kernel, (1, k as isize), &rows, (cols as isize, 1), 0.0, &mut col);
        col2im(&col, &sub, &mut x[start * img..(start + sub.batch) * img]);
    }
    x
}

/// Kernel gradient shared by both directions: `Σ feature_rows · im2col(image)ᵀ`.
pub(crate) fn conv_kernel_grad(image: &[f32], feature: &[f32], g: &ConvGeom) -> Vec<f32> {
    let mut dk = vec![0.0f32; g.kernel_len()];
    let k = g.patch();
    let img = g.c * g.h * g.w;
    let feat = g.o * g.positions();
    for (start, sub) in chunks(g) {
        let col = im2col(&image[start * img..(start + sub.batch) * img], &sub);
        let cols = sub.columns();
        let mut rows = vec![0.0f32; g.o * cols];
        feature_to_rows_into(
            &feature[start * feat..(start + sub.batch) * feat],
            sub.batch,
            g.o,
            g.positions(),
            &mut rows,
        );
        gemm(g.o, cols, k, &rows, (cols as isize, 1), &col, (1, cols as isize), 1.0, &mut dk);
    }
    dk
}
