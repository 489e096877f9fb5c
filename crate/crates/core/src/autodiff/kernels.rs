//! Raw loops behind the differentiable ops. All reductions run in a fixed
//! order so results are bitwise reproducible.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
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

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let &[n, c_in, h, w] = input else {
            return Err(Error::dim(format!("conv2d input must be NCHW, got {input:?}")));
        };
        let &[c_out, kc, kh, kw] = kernel else {
            return Err(Error::dim(format!("conv2d kernel must be rank 4, got {kernel:?}")));
        };
        if kc != c_in {
            return Err(Error::dim(format!(
                "conv2d: input has {c_in} channels, kernel expects {kc}"
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad || kh == 0 || kw == 0 {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} does not fit {h}x{w} with padding {pad}"
            )));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Output columns `[lo, hi)` whose input column for kernel offset `kx` is in range.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = kx as isize - self.pad as isize;
        // ox*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        // ox*s + shift <= w-1
        let top = self.w as isize - 1 - shift;
        let hi = if top < 0 { 0 } else { top / s + 1 };
        let hi = hi.min(self.ow as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// Unrolls input patches into `[c_in*kh*kw, n*oh*ow]` so each convolution
/// becomes one long-row matrix product.
fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let p = g.oh * g.ow;
    let cols = g.n * p;
    let mut col = vec![0.0; g.c_in * g.kh * g.kw * cols];
    for ci in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = g.col_range(kx);
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &mut col[r * cols..][..cols];
                for n in 0..g.n {
                    let in_plane = &input[(n * g.c_in + ci) * plane_in..][..plane_in];
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let dst = &mut row[n * p + oy * g.ow..][..g.ow];
                        let src = &in_plane[iy * g.w..][..g.w];
                        for ox in lo..hi {
                            dst[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds `[c_in*kh*kw, n*oh*ow]` patch gradients back onto the input.
fn col2im(g: &ConvGeom, col: &[f64], grad_in: &mut [f64]) {
    let plane_in = g.h * g.w;
    let p = g.oh * g.ow;
    let cols = g.n * p;
    for ci in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = g.col_range(kx);
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &col[r * cols..][..cols];
                for n in 0..g.n {
                    let gin_plane = &mut grad_in[(n * g.c_in + ci) * plane_in..][..plane_in];
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let src = &row[n * p + oy * g.ow..][..g.ow];
                        let dst = &mut gin_plane[iy * g.w..][..g.w];
                        for ox in lo..hi {
                            dst[ox * g.stride + kx - g.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with four fixed accumulators; the order is deterministic.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let p = g.oh * g.ow;
    let cols = g.n * p;
    let r_len = g.c_in * g.kh * g.kw;
    let col = im2col(g, input);
    let mut y = vec![0.0; g.c_out * cols];
    for co in 0..g.c_out {
        let y_row = &mut y[co * cols..][..cols];
        for r in 0..r_len {
            axpy(y_row, kernel[co * r_len + r], &col[r * cols..][..cols]);
        }
    }
    let mut out = vec![0.0; g.n * g.c_out * p];
    for co in 0..g.c_out {
        for n in 0..g.n {
            out[(n * g.c_out + co) * p..][..p].copy_from_slice(&y[co * cols + n * p..][..p]);
        }
    }
    out
}

/// Accumulates input and/or kernel gradients of a convolution.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    grad_in: Option<&mut [f64]>,
    grad_k: Option<&mut [f64]>,
) {
    let p = g.oh * g.ow;
    let cols = g.n * p;
    let r_len = g.c_in * g.kh * g.kw;
    let mut gy = vec![0.0; g.c_out * cols];
    for co in 0..g.c_out {
        for n in 0..g.n {
            gy[co * cols + n * p..][..p].copy_from_slice(&grad_out[(n * g.c_out + co) * p..][..p]);
        }
    }
    if let Some(gk) = grad_k {
        let col = im2col(g, input);
        for co in 0..g.c_out {
            let gy_row = &gy[co * cols..][..cols];
            for r in 0..r_len {
                gk[co * r_len + r] += dot(gy_row, &col[r * cols..][..cols]);
            }
        }
    }
    if let Some(gin) = grad_in {
        let mut gcol = vec![0.0; r_len * cols];
        for co in 0..g.c_out {
            let gy_row = &gy[co * cols..][..cols];
            for r in 0..r_len {
                axpy(&mut gcol[r * cols..][..cols], kernel[co * r_len + r], gy_row);
            }
        }
        col2im(g, &gcol, gin);
    }
}

/// `a[m,k] @ b[k,n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..][..n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (cij, &bpj) in c_row.iter_mut().zip(&b[p * n..][..n]) {
                *cij += aip * bpj;
            }
        }
    }
    c
}

/// `x[rows,in] @ w[out,in]^T`.
pub(crate) fn matmul_bt(x: &[f64], w: &[f64], rows: usize, inner: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        let x_row = &x[r * inner..][..inner];
        for o in 0..out {
            let w_row = &w[o * inner..][..inner];
            y[r * out + o] = x_row.iter().zip(w_row).map(|(a, b)| a * b).sum();
        }
    }
    y
}
