//! Raw numeric kernels shared by the tape's forward and backward passes.
//!
//! Everything here runs sequentially with a fixed reduction order, so results
//! are bit-reproducible for identical inputs.

use super::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    pub fn cols(&self) -> usize {
        self.n * self.out_plane()
    }
}

/// Unfolds NCHW input into a `(C*KH*KW) x (N*OH*OW)` matrix.
pub(crate) fn im2col<T: Float>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.cols();
    let plane = g.out_plane();
    let mut cols = vec![T::zero(); g.patch() * ncols];
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let src = &input[(b * g.c + ci) * g.h * g.w..(b * g.c + ci + 1) * g.h * g.w];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a column matrix back onto NCHW, accumulating overlapping patches.
pub(crate) fn col2im<T: Float>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let ncols = g.cols();
    let plane = g.out_plane();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let dst = &mut out[(b * g.c + ci) * g.h * g.w..(b * g.c + ci + 1) * g.h * g.w];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Returns `(output NCHW, im2col buffer)`.
pub(crate) fn conv2d_forward<T: Float>(input: &[T], kernel: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let cols = im2col(input, g);
    let ncols = g.cols();
    let k = g.patch();
    let mut mat = vec![T::zero(); g.o * ncols];
    T::gemm(
        g.o, k, ncols, T::one(), kernel, k as isize, 1, &cols, ncols as isize, 1, T::zero(), &mut mat,
        ncols as isize, 1,
    );
    // (O, N, P) -> (N, O, P)
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.n * g.o * plane];
    for o in 0..g.o {
        for b in 0..g.n {
            let src = &mat[o * ncols + b * plane..o * ncols + (b + 1) * plane];
            out[(b * g.o + o) * plane..(b * g.o + o + 1) * plane].copy_from_slice(src);
        }
    }
    (out, cols)
}

/// Gradients of a convolution with respect to its input and kernel.
pub(crate) fn conv2d_backward<T: Float>(
    grad_out: &[T],
    kernel: &[T],
    cols: &[T],
    g: &ConvGeom,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let ncols = g.cols();
    let plane = g.out_plane();
    let k = g.patch();
    let mut dmat = vec![T::zero(); g.o * ncols];
    for b in 0..g.n {
        for o in 0..g.o {
            let src = &grad_out[(b * g.o + o) * plane..(b * g.o + o + 1) * plane];
            dmat[o * ncols + b * plane..o * ncols + (b + 1) * plane].copy_from_slice(src);
        }
    }
    let dkernel = want_kernel.then(|| {
        let mut dk = vec![T::zero(); g.o * k];
        T::gemm(
            g.o, ncols, k, T::one(), &dmat, ncols as isize, 1, cols, 1, ncols as isize, T::zero(),
            &mut dk, k as isize, 1,
        );
        dk
    });
    let dinput = want_input.then(|| {
        let mut dcols = vec![T::zero(); k * ncols];
        T::gemm(
            k, g.o, ncols, T::one(), kernel, 1, k as isize, &dmat, ncols as isize, 1, T::zero(),
            &mut dcols, ncols as isize, 1,
        );
        let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    (dinput, dkernel)
}

/// Row-wise softmax of an `rows x k` matrix.
pub fn softmax_rows<T: Float>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Per-row `-sum_k t_k log softmax(z)_k`, computed in f64.
pub fn cross_entropy_rows<T: Float>(logits: &[T], targets: &[T], k: usize) -> Vec<f64> {
    logits
        .chunks_exact(k)
        .zip(targets.chunks_exact(k))
        .map(|(row, t)| {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            row.iter()
                .zip(t)
                .map(|(&z, &p)| {
                    let p = p.as_f64();
                    if p == 0.0 {
                        0.0
                    } else {
                        -p * (z.as_f64() - lse)
                    }
                })
                .sum()
        })
        .collect()
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
