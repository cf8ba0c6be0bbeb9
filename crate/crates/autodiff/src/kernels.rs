//! Dense convolution kernels shared by the forward and backward passes.
//!
//! Every loop nest has a fixed summation order. Work is split across the
//! batch dimension only, and per-sample weight gradients are reduced in
//! sample order, so results are bit-identical for any thread count.

use rayon::prelude::*;

/// Geometry of a 2-D convolution over an NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Range of output positions `o` for which `o * stride + k - pad` lands in `0..len`.
#[inline]
fn valid_range(len: usize, out_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let k = k as i64;
    let s = stride as i64;
    let p = pad as i64;
    // o*s + k - p >= 0  =>  o >= ceil((p - k) / s)
    let lo = if p - k <= 0 { 0 } else { (p - k + s - 1) / s };
    // o*s + k - p <= len - 1
    let hi_num = len as i64 - 1 + p - k;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / s + 1).min(out_len as i64);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// Range of input positions `i` for which `i * stride + k - pad` lands in `0..out_len`.
#[inline]
fn scatter_range(in_len: usize, out_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    valid_range(out_len, in_len, k, stride, pad)
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * g.oh * g.ow;
    let mut out = vec![0.0; g.n * out_sample];
    out.par_chunks_mut(out_sample.max(1))
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = &x[n * in_sample..(n + 1) * in_sample];
            for o in 0..g.c_out {
                let out_o = &mut out_n[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
                for c in 0..g.c_in {
                    let x_c = &x_n[c * g.h * g.w..(c + 1) * g.h * g.w];
                    for ky in 0..g.kh {
                        let (oy0, oy1) = valid_range(g.h, g.oh, ky, g.stride, g.pad);
                        for kx in 0..g.kw {
                            let wv = w[((o * g.c_in + c) * g.kh + ky) * g.kw + kx];
                            let (ox0, ox1) = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let row = &x_c[iy * g.w..(iy + 1) * g.w];
                                let orow = &mut out_o[oy * g.ow..(oy + 1) * g.ow];
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * row[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Returns `(dx, dw)` for upstream gradient `gy`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * g.oh * g.ow;
    let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x[n * in_sample..(n + 1) * in_sample];
            let g_n = &gy[n * out_sample..(n + 1) * out_sample];
            let mut dx = vec![0.0; in_sample];
            let mut dw = vec![0.0; w.len()];
            for o in 0..g.c_out {
                let g_o = &g_n[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
                for c in 0..g.c_in {
                    let x_c = &x_n[c * g.h * g.w..(c + 1) * g.h * g.w];
                    let dx_c = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
                    for ky in 0..g.kh {
                        let (oy0, oy1) = valid_range(g.h, g.oh, ky, g.stride, g.pad);
                        for kx in 0..g.kw {
                            let widx = ((o * g.c_in + c) * g.kh + ky) * g.kw + kx;
                            let wv = w[widx];
                            let (ox0, ox1) = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                            let mut acc = 0.0;
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let grow = &g_o[oy * g.ow..(oy + 1) * g.ow];
                                for ox in ox0..ox1 {
                                    let ix = ox * g.stride + kx - g.pad;
                                    acc += x_c[iy * g.w + ix] * grow[ox];
                                    dx_c[iy * g.w + ix] += wv * grow[ox];
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
            (dx, dw)
        })
        .collect();
    let mut dx = Vec::with_capacity(x.len());
    let mut dw = vec![0.0; w.len()];
    for (dx_n, dw_n) in partial {
        dx.extend_from_slice(&dx_n);
        for (a, b) in dw.iter_mut().zip(&dw_n) {
            *a += b;
        }
    }
    (dx, dw)
}

/// Transposed convolution. Weight layout is `[c_in, c_out, kh, kw]`; `g.h`/`g.w`
/// are the input spatial dims and `g.oh`/`g.ow` the (larger) output dims.
pub(crate) fn conv_transpose2d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * g.oh * g.ow;
    let mut out = vec![0.0; g.n * out_sample];
    out.par_chunks_mut(out_sample.max(1))
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = &x[n * in_sample..(n + 1) * in_sample];
            for o in 0..g.c_out {
                let out_o = &mut out_n[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
                for c in 0..g.c_in {
                    let x_c = &x_n[c * g.h * g.w..(c + 1) * g.h * g.w];
                    for ky in 0..g.kh {
                        let (iy0, iy1) = scatter_range(g.h, g.oh, ky, g.stride, g.pad);
                        for kx in 0..g.kw {
                            let wv = w[((c * g.c_out + o) * g.kh + ky) * g.kw + kx];
                            let (ix0, ix1) = scatter_range(g.w, g.ow, kx, g.stride, g.pad);
                            for iy in iy0..iy1 {
                                let oy = iy * g.stride + ky - g.pad;
                                let row = &x_c[iy * g.w..(iy + 1) * g.w];
                                let orow = &mut out_o[oy * g.ow..(oy + 1) * g.ow];
                                for ix in ix0..ix1 {
                                    orow[ix * g.stride + kx - g.pad] += wv * row[ix];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

pub(crate) fn conv_transpose2d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * g.oh * g.ow;
    let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x[n * in_sample..(n + 1) * in_sample];
            let g_n = &gy[n * out_sample..(n + 1) * out_sample];
            let mut dx = vec![0.0; in_sample];
            let mut dw = vec![0.0; w.len()];
            for o in 0..g.c_out {
                let g_o = &g_n[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
                for c in 0..g.c_in {
                    let x_c = &x_n[c * g.h * g.w..(c + 1) * g.h * g.w];
                    let dx_c = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
                    for ky in 0..g.kh {
                        let (iy0, iy1) = scatter_range(g.h, g.oh, ky, g.stride, g.pad);
                        for kx in 0..g.kw {
                            let widx = ((c * g.c_out + o) * g.kh + ky) * g.kw + kx;
                            let wv = w[widx];
                            let (ix0, ix1) = scatter_range(g.w, g.ow, kx, g.stride, g.pad);
                            let mut acc = 0.0;
                            for iy in iy0..iy1 {
                                let oy = iy * g.stride + ky - g.pad;
                                let grow = &g_o[oy * g.ow..(oy + 1) * g.ow];
                                for ix in ix0..ix1 {
                                    let gv = grow[ix * g.stride + kx - g.pad];
                                    acc += x_c[iy * g.w + ix] * gv;
                                    dx_c[iy * g.w + ix] += wv * gv;
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
            (dx, dw)
        })
        .collect();
    let mut dx = Vec::with_capacity(x.len());
    let mut dw = vec![0.0; w.len()];
    for (dx_n, dw_n) in partial {
        dx.extend_from_slice(&dx_n);
        for (a, b) in dw.iter_mut().zip(&dw_n) {
            *a += b;
        }
    }
    (dx, dw)
}

/// `[m, k] x [k, n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `[m, n] x [k, n]^T -> [m, k]`.
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// `[m, k]^T x [m, n] -> [k, n]`.
pub(crate) fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}
