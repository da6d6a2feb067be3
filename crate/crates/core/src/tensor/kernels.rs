//! Convolution kernels: im2col / col2im around a dense GEMM, one batch
//! sample per work item.
//!
//! All three kernels share one geometry: a "dense" side `[C, H, W]` and a
//! "strided" side `[F, Ho, Wo]` with `Ho = (H + 2p - k) / s + 1`.
//! `conv_forward` maps dense to strided; `conv_backward_data` is its exact
//! adjoint (and therefore the forward pass of a transposed convolution);
//! `conv_backward_filter` is the kernel gradient.

use std::cell::RefCell;

use crate::exec::Exec;

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on a per-thread buffer of `len` values with unspecified contents.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// Spatial geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn dense_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn strided_len(&self) -> usize {
        self.filters * self.out_height() * self.out_width()
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with optional
/// transposition of the row-major operands.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
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

/// Output columns `lo..hi` whose input column `oj * s + kj - p` is in range.
fn valid_cols(wo: usize, width: usize, s: usize, kj: usize, p: usize) -> (usize, usize) {
    let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
    let hi = if width + p <= kj { 0 } else { ((width - 1 + p - kj) / s + 1).min(wo) };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let (h, w) = (g.height, g.width);
    let plane = ho * wo;
    for c in 0..g.channels {
        let src = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * plane;
                let dst = &mut cols[row..row + plane];
                let (lo, hi) = valid_cols(wo, w, s, kj, p);
                for oi in 0..ho {
                    let line = &mut dst[oi * wo..(oi + 1) * wo];
                    let ii = oi * s + ki;
                    if ii < p || ii - p >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &src[(ii - p) * w..(ii - p + 1) * w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if lo < hi {
                        let j0 = lo * s + kj - p;
                        if s == 1 {
                            line[lo..hi].copy_from_slice(&srow[j0..j0 + hi - lo]);
                        } else {
                            for (v, x) in line[lo..hi].iter_mut().zip(srow[j0..].iter().step_by(s)) {
                                *v = *x;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let (h, w) = (g.height, g.width);
    let plane = ho * wo;
    x.fill(0.0);
    for c in 0..g.channels {
        let dst = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * plane;
                let src = &cols[row..row + plane];
                let (lo, hi) = valid_cols(wo, w, s, kj, p);
                if lo >= hi {
                    continue;
                }
                let j0 = lo * s + kj - p;
                for oi in 0..ho {
                    let ii = oi * s + ki;
                    if ii < p || ii - p >= h {
                        continue;
                    }
                    let drow = &mut dst[(ii - p) * w + j0..(ii - p + 1) * w];
                    for (d, v) in drow.iter_mut().step_by(s).zip(&src[oi * wo + lo..oi * wo + hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Dense `[N, C, H, W]` to strided `[N, F, Ho, Wo]` with kernel `[F, C, k, k]`.
pub fn conv_forward(exec: Exec, x: &[f64], batch: usize, w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (dense, strided, patch) = (g.dense_len(), g.strided_len(), g.patch());
    let plane = g.out_height() * g.out_width();
    let mut out = vec![0.0; batch * strided];
    exec.for_each_chunk(&mut out, strided, |i, y| {
        with_scratch(patch * plane, |cols| {
            im2col(&x[i * dense..(i + 1) * dense], g, cols);
            gemm(g.filters, patch, plane, w, false, cols, false, y, 0.0);
        });
    });
    out
}

/// Strided `[N, F, Ho, Wo]` back to dense `[N, C, H, W]`: the adjoint of
/// [`conv_forward`] for the same kernel.
pub fn conv_backward_data(exec: Exec, dy: &[f64], batch: usize, w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (dense, strided, patch) = (g.dense_len(), g.strided_len(), g.patch());
    let plane = g.out_height() * g.out_width();
    let mut out = vec![0.0; batch * dense];
    exec.for_each_chunk(&mut out, dense, |i, dx| {
        with_scratch(patch * plane, |cols| {
            gemm(patch, g.filters, plane, w, true, &dy[i * strided..(i + 1) * strided], false, cols, 0.0);
            col2im(cols, g, dx);
        });
    });
    out
}

/// Kernel gradient `[F, C, k, k]` summed over the batch in sample order.
pub fn conv_backward_filter(exec: Exec, x: &[f64], dy: &[f64], batch: usize, g: &ConvGeom) -> Vec<f64> {
    let (dense, strided, patch) = (g.dense_len(), g.strided_len(), g.patch());
    let plane = g.out_height() * g.out_width();
    let partials = exec.map(batch, |i| {
        let mut dw = vec![0.0; g.filters * patch];
        with_scratch(patch * plane, |cols| {
            im2col(&x[i * dense..(i + 1) * dense], g, cols);
            gemm(g.filters, plane, patch, &dy[i * strided..(i + 1) * strided], false, cols, true, &mut dw, 0.0);
        });
        dw
    });
    let mut total = vec![0.0; g.filters * patch];
    for part in partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}
