//! Dense array kernels shared by the graph ops.
//!
//! Parallel kernels split work into a fixed number of chunks so results are
//! bitwise identical no matter how many worker threads are available.

use super::Real;
use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use rayon::prelude::*;

/// Fixed parallel fan-out; independent of the rayon pool size.
pub const PAR_CHUNKS: usize = 4;

/// Row-chunked matrix product `a (m,k) x b (k,n)`.
pub fn gemm<F: Real>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let (m, k) = a.dim();
    let n = b.dim().1;
    let mut out = Array2::<F>::zeros((m, n));
    if m * n * k < 1 << 16 || m < PAR_CHUNKS {
        ndarray::linalg::general_mat_mul(F::one(), &a, &b, F::zero(), &mut out);
        return out;
    }
    let rows = m.div_ceil(PAR_CHUNKS);
    let out_chunks: Vec<_> = out.axis_chunks_iter_mut(Axis(0), rows).collect();
    let a_chunks: Vec<_> = a.axis_chunks_iter(Axis(0), rows).collect();
    out_chunks
        .into_par_iter()
        .zip(a_chunks.into_par_iter())
        .for_each(|(mut oc, ac)| {
            ndarray::linalg::general_mat_mul(F::one(), &ac, &b, F::zero(), &mut oc);
        });
    out
}

/// Batched matmul `(g,m,k) x (g,k,n)`; `transpose_b` treats `b` as `(g,n,k)`.
pub fn bmm<F: Real>(a: ArrayView3<F>, b: ArrayView3<F>, transpose_b: bool) -> Array3<F> {
    let (g, m, _k) = a.dim();
    let n = if transpose_b { b.dim().1 } else { b.dim().2 };
    let mut out = Array3::<F>::zeros((g, m, n));
    let out_chunks: Vec<_> = out.axis_iter_mut(Axis(0)).collect();
    out_chunks
        .into_par_iter()
        .enumerate()
        .for_each(|(gi, mut oc)| {
            let av = a.index_axis(Axis(0), gi);
            let bv = b.index_axis(Axis(0), gi);
            if transpose_b {
                ndarray::linalg::general_mat_mul(F::one(), &av, &bv.t(), F::zero(), &mut oc);
            } else {
                ndarray::linalg::general_mat_mul(F::one(), &av, &bv, F::zero(), &mut oc);
            }
        });
    out
}

/// Batched matmul with the first operand transposed: per batch `a^T x b`
/// where `a (g,m,k)`, `b (g,m,n)` giving `(g,k,n)`.
pub fn bmm_tn<F: Real>(a: ArrayView3<F>, b: ArrayView3<F>) -> Array3<F> {
    let (g, _m, k) = a.dim();
    let n = b.dim().2;
    let mut out = Array3::<F>::zeros((g, k, n));
    let out_chunks: Vec<_> = out.axis_iter_mut(Axis(0)).collect();
    out_chunks
        .into_par_iter()
        .enumerate()
        .for_each(|(gi, mut oc)| {
            let av = a.index_axis(Axis(0), gi);
            let bv = b.index_axis(Axis(0), gi);
            ndarray::linalg::general_mat_mul(F::one(), &av.t(), &bv, F::zero(), &mut oc);
        });
    out
}

pub fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Unfolds one image `(C,H,W)` into columns `(C*kh*kw, OH*OW)`.
#[allow(clippy::too_many_arguments)]
pub fn im2col<F: Real>(
    x: ArrayView3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let oh = conv_out_size(h, kh, stride, ph);
    let ow = conv_out_size(w, kw, stride, pw);
    let mut cols = Array2::<F>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Folds column gradients back into an image gradient; inverse of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im<F: Real>(
    dcols: ArrayView2<F>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
) -> Array3<F> {
    let oh = conv_out_size(h, kh, stride, ph);
    let ow = conv_out_size(w, kw, stride, pw);
    let mut dx = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[ci, iy as usize, ix as usize]] =
                            dx[[ci, iy as usize, ix as usize]] + dcols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    dx
}

/// Conv2d forward over a batch: `x (B,C,H,W)`, `w (O,C,kh,kw)`, zero padding
/// `(ph, pw)`, square stride.
pub fn conv2d<F: Real>(
    x: ArrayView4<F>,
    w: ArrayView4<F>,
    stride: usize,
    ph: usize,
    pw: usize,
) -> Array4<F> {
    let (b, _c, h, wd) = x.dim();
    let (o, c2, kh, kw) = w.dim();
    let oh = conv_out_size(h, kh, stride, ph);
    let ow = conv_out_size(wd, kw, stride, pw);
    let w_std = w.as_standard_layout();
    let wmat = w_std.view().into_shape_with_order((o, c2 * kh * kw)).unwrap();
    let mut out = Array4::<F>::zeros((b, o, oh, ow));
    let out_views: Vec<_> = out.axis_iter_mut(Axis(0)).collect();
    out_views.into_par_iter().enumerate().for_each(|(bi, mut ov)| {
        let cols = im2col(x.index_axis(Axis(0), bi), kh, kw, stride, ph, pw);
        let y = wmat.dot(&cols); // (o, oh*ow)
        let y = y.into_shape_with_order((o, oh, ow)).unwrap();
        ov.assign(&y);
    });
    out
}

/// Conv2d backward. Returns `(dx, dw)`.
pub fn conv2d_backward<F: Real>(
    x: ArrayView4<F>,
    w: ArrayView4<F>,
    dy: ArrayView4<F>,
    stride: usize,
    ph: usize,
    pw: usize,
) -> (Array4<F>, Array4<F>) {
    let (b, c, h, wd) = x.dim();
    let (o, _, kh, kw) = w.dim();
    let (_, _, oh, ow) = dy.dim();
    let w_std = w.as_standard_layout();
    let wmat = w_std.view().into_shape_with_order((o, c * kh * kw)).unwrap();

    let mut dx = Array4::<F>::zeros((b, c, h, wd));
    let dx_views: Vec<_> = dx.axis_iter_mut(Axis(0)).collect();

    // Per-sample weight gradients are summed in batch order afterwards so the
    // result does not depend on scheduling.
    let per_sample: Vec<Array2<F>> = dx_views
        .into_par_iter()
        .enumerate()
        .map(|(bi, mut dxv)| {
            let dyb = dy.index_axis(Axis(0), bi).as_standard_layout().to_owned();
            let dyb = dyb.into_shape_with_order((o, oh * ow)).unwrap();
            let cols = im2col(x.index_axis(Axis(0), bi), kh, kw, stride, ph, pw);
            let dwb = dyb.dot(&cols.t()); // (o, c*kh*kw)
            let dcols = wmat.t().dot(&dyb); // (c*kh*kw, oh*ow)
            dxv.assign(&col2im(dcols.view(), c, h, wd, kh, kw, stride, ph, pw));
            dwb
        })
        .collect();
    let mut dw = Array2::<F>::zeros((o, c * kh * kw));
    for dwb in per_sample {
        dw = dw + dwb;
    }
    let dw = dw.into_shape_with_order((o, c, kh, kw)).unwrap();
    (dx, dw)
}

pub fn avg_pool2d<F: Real>(x: ArrayView4<F>, k: usize) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (h / k, w / k);
    let scale = F::from_f64(1.0 / (k * k) as f64);
    let mut out = Array4::<F>::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let window = x.slice(s![bi, ci, oy * k..(oy + 1) * k, ox * k..(ox + 1) * k]);
                    out[[bi, ci, oy, ox]] = window.sum() * scale;
                }
            }
        }
    }
    out
}

pub fn avg_pool2d_backward<F: Real>(dy: ArrayView4<F>, k: usize) -> Array4<F> {
    let (b, c, oh, ow) = dy.dim();
    let scale = F::from_f64(1.0 / (k * k) as f64);
    let mut dx = Array4::<F>::zeros((b, c, oh * k, ow * k));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dy[[bi, ci, oy, ox]] * scale;
                    for dy_ in 0..k {
                        for dx_ in 0..k {
                            dx[[bi, ci, oy * k + dy_, ox * k + dx_]] = g;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn upsample2x<F: Real>(x: ArrayView4<F>) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let mut out = Array4::<F>::zeros((b, c, h * 2, w * 2));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x_ in 0..w {
                    let v = x[[bi, ci, y, x_]];
                    out[[bi, ci, 2 * y, 2 * x_]] = v;
                    out[[bi, ci, 2 * y, 2 * x_ + 1]] = v;
                    out[[bi, ci, 2 * y + 1, 2 * x_]] = v;
                    out[[bi, ci, 2 * y + 1, 2 * x_ + 1]] = v;
                }
            }
        }
    }
    out
}

pub fn upsample2x_backward<F: Real>(dy: ArrayView4<F>) -> Array4<F> {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x_ in 0..w {
                    dx[[bi, ci, y, x_]] = dy[[bi, ci, 2 * y, 2 * x_]]
                        + dy[[bi, ci, 2 * y, 2 * x_ + 1]]
                        + dy[[bi, ci, 2 * y + 1, 2 * x_]]
                        + dy[[bi, ci, 2 * y + 1, 2 * x_ + 1]];
                }
            }
        }
    }
    dx
}

/// `(B,C,H,W)` into tokens `(B, N, C*p*p)`, patches row-major, features
/// ordered `(c, dy, dx)`.
pub fn patchify<F: Real>(x: ArrayView4<F>, p: usize) -> Array3<F> {
    let (b, c, h, w) = x.dim();
    let (gh, gw) = (h / p, w / p);
    let n = gh * gw;
    let mut out = Array3::<F>::zeros((b, n, c * p * p));
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let t = gy * gw + gx;
                for ci in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            out[[bi, t, (ci * p + dy) * p + dx]] =
                                x[[bi, ci, gy * p + dy, gx * p + dx]];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn unpatchify<F: Real>(
    tokens: ArrayView3<F>,
    p: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Array4<F> {
    let b = tokens.dim().0;
    let (gh, gw) = (h / p, w / p);
    let mut out = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let t = gy * gw + gx;
                for ci in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            out[[bi, ci, gy * p + dy, gx * p + dx]] =
                                tokens[[bi, t, (ci * p + dy) * p + dx]];
                        }
                    }
                }
            }
        }
    }
    out
}
