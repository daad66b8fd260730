//! Slice-level convolution kernels shared by the forward and backward passes.
//!
//! All loops run in a fixed order so results are bitwise reproducible.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
    /// Each output channel reads only the input channel of the same index.
    pub depthwise: bool,
}

impl ConvGeom {
    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0 && !self.depthwise
    }

    /// Input row read by output row `oy` through kernel row `ky`, if inside the image.
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy * self.stride + ky;
        if iy < self.pad || iy - self.pad >= self.h {
            None
        } else {
            Some(iy - self.pad)
        }
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the input row.
    fn column_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        if self.w + self.pad <= kx {
            return (0, 0);
        }
        let hi = ((self.w - 1 + self.pad - kx) / s + 1).min(self.ow);
        (lo.min(hi), hi)
    }
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with four interleaved partial sums, which lets the compiler
/// vectorise while keeping the summation order fixed.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ar.iter().zip(br) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y_i += Σ_j a[i][j] x_j` for four destination rows, reading each `x_j`
/// once for all four.
#[inline]
fn axpy_rows4(y: &mut [f64], stride: usize, len: usize, a: [f64; 4], x: &[f64]) {
    let (y0, rest) = y.split_at_mut(stride);
    let (y1, rest) = rest.split_at_mut(stride);
    let (y2, y3) = rest.split_at_mut(stride);
    let (y0, y1, y2, y3, x) = (&mut y0[..len], &mut y1[..len], &mut y2[..len], &mut y3[..len], &x[..len]);
    for p in 0..len {
        let v = x[p];
        y0[p] += a[0] * v;
        y1[p] += a[1] * v;
        y2[p] += a[2] * v;
        y3[p] += a[3] * v;
    }
}

/// `y += Σ_i a_i x_i` over four source rows.
#[inline]
fn axpy_sum4(y: &mut [f64], a: [f64; 4], x: [&[f64]; 4]) {
    let len = y.len();
    let (x0, x1, x2, x3) = (&x[0][..len], &x[1][..len], &x[2][..len], &x[3][..len]);
    for p in 0..len {
        y[p] += (a[0] * x0[p] + a[1] * x1[p]) + (a[2] * x2[p] + a[3] * x3[p]);
    }
}

/// Target width of the unfolded sample groups: enough columns for long
/// inner loops, few enough that the group stays in cache.
const GROUP_COLUMNS: usize = 256;

/// Consecutive samples unfolded together.
fn group_size(g: &ConvGeom) -> usize {
    (GROUP_COLUMNS / g.out_plane().max(1)).clamp(1, g.n.max(1))
}

/// Unfolds samples `s0..s1` of `x` into `cols`, rows indexed by
/// `(c, ky, kx)` and columns by `(n, oy, ox)`.
fn im2col(x: &[f64], g: &ConvGeom, s0: usize, s1: usize, cols: &mut Vec<f64>) {
    let (ip, op) = (g.in_plane(), g.out_plane());
    let width = (s1 - s0) * op;
    let len = g.c_in * g.k * g.k * width;
    // Padding taps are never written, so they stay zero across groups of the
    // same width.
    if cols.len() != len {
        cols.clear();
        cols.resize(len, 0.0);
    }
    if g.is_pointwise() {
        for c in 0..g.c_in {
            for s in s0..s1 {
                cols[c * width + (s - s0) * op..][..op].copy_from_slice(&x[(s * g.c_in + c) * ip..][..ip]);
            }
        }
        return;
    }
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((c * g.k + ky) * g.k + kx) * width..][..width];
                let (lo, hi) = g.column_range(kx);
                for s in s0..s1 {
                    let xc = &x[(s * g.c_in + c) * ip..][..ip];
                    let rn = &mut row[(s - s0) * op..][..op];
                    for oy in 0..g.oh {
                        let Some(iy) = g.input_row(oy, ky) else { continue };
                        let xrow = &xc[iy * g.w..][..g.w];
                        let r = &mut rn[oy * g.ow..][..g.ow];
                        if g.stride == 1 {
                            let off = lo + kx - g.pad;
                            r[lo..hi].copy_from_slice(&xrow[off..off + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                r[ox] = xrow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: adds unfolded gradients of samples `s0..s1` onto `dx`.
fn col2im(cols: &[f64], g: &ConvGeom, s0: usize, s1: usize, dx: &mut [f64]) {
    let (ip, op) = (g.in_plane(), g.out_plane());
    let width = (s1 - s0) * op;
    if g.is_pointwise() {
        for c in 0..g.c_in {
            for s in s0..s1 {
                let src = &cols[c * width + (s - s0) * op..][..op];
                dx[(s * g.c_in + c) * ip..][..ip].copy_from_slice(src);
            }
        }
        return;
    }
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((c * g.k + ky) * g.k + kx) * width..][..width];
                let (lo, hi) = g.column_range(kx);
                for s in s0..s1 {
                    let dxc = &mut dx[(s * g.c_in + c) * ip..][..ip];
                    let rn = &row[(s - s0) * op..][..op];
                    for oy in 0..g.oh {
                        let Some(iy) = g.input_row(oy, ky) else { continue };
                        let dxrow = &mut dxc[iy * g.w..][..g.w];
                        let r = &rn[oy * g.ow..][..g.ow];
                        if g.stride == 1 {
                            let off = lo + kx - g.pad;
                            for (d, v) in dxrow[off..off + hi - lo].iter_mut().zip(&r[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for ox in lo..hi {
                                dxrow[ox * g.stride + kx - g.pad] += r[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Copies output-shaped samples `s0..s1` into channel-major rows.
fn gather_outputs(y: &[f64], g: &ConvGeom, s0: usize, s1: usize, out: &mut Vec<f64>) {
    let op = g.out_plane();
    let width = (s1 - s0) * op;
    out.resize(g.c_out * width, 0.0);
    for o in 0..g.c_out {
        for s in s0..s1 {
            out[o * width + (s - s0) * op..][..op].copy_from_slice(&y[(s * g.c_out + o) * op..][..op]);
        }
    }
}

/// Unfolded rows read by output channel `o`, and the offset of its weights.
fn taps(g: &ConvGeom, o: usize) -> (core::ops::Range<usize>, usize) {
    let kk = g.k * g.k;
    if g.depthwise {
        (o * kk..(o + 1) * kk, o * kk)
    } else {
        (0..g.c_in * kk, o * g.c_in * kk)
    }
}

fn sample_groups(g: &ConvGeom) -> impl Iterator<Item = (usize, usize)> {
    let n = g.n;
    let gs = group_size(g);
    (0..n).step_by(gs).map(move |s0| (s0, (s0 + gs).min(n)))
}

pub(crate) fn conv_forward(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let op = g.out_plane();
    let fan = g.c_in * g.k * g.k;
    let blocked = if g.depthwise { 0 } else { g.c_out / 4 * 4 };
    let mut y = vec![0.0; g.n * g.c_out * op];
    let mut cols = Vec::new();
    let mut acc = Vec::new();
    for (s0, s1) in sample_groups(g) {
        let width = (s1 - s0) * op;
        im2col(x, g, s0, s1, &mut cols);
        acc.clear();
        acc.resize(g.c_out * width, 0.0);
        for o in (0..blocked).step_by(4) {
            for r in 0..fan {
                let a = [0, 1, 2, 3].map(|i| wt[(o + i) * fan + r]);
                axpy_rows4(&mut acc[o * width..], width, width, a, &cols[r * width..]);
            }
        }
        for o in blocked..g.c_out {
            let (rows, w0) = taps(g, o);
            let yo = &mut acc[o * width..][..width];
            for (j, r) in rows.enumerate() {
                axpy(yo, wt[w0 + j], &cols[r * width..][..width]);
            }
        }
        for o in 0..g.c_out {
            for s in s0..s1 {
                y[(s * g.c_out + o) * op..][..op].copy_from_slice(&acc[o * width + (s - s0) * op..][..op]);
            }
        }
    }
    y
}

/// Gradient of a convolution with respect to its input.
pub(crate) fn conv_backward_input(dy: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let op = g.out_plane();
    let rows = g.c_in * g.k * g.k;
    let blocked = if g.depthwise { 0 } else { g.c_out / 4 * 4 };
    let mut dx = vec![0.0; g.n * g.c_in * g.in_plane()];
    let mut dyc = Vec::new();
    let mut dcols = Vec::new();
    for (s0, s1) in sample_groups(g) {
        let width = (s1 - s0) * op;
        gather_outputs(dy, g, s0, s1, &mut dyc);
        dcols.clear();
        dcols.resize(rows * width, 0.0);
        for o in (0..blocked).step_by(4) {
            let dy4 = [0, 1, 2, 3].map(|i| &dyc[(o + i) * width..][..width]);
            for r in 0..rows {
                let a = [0, 1, 2, 3].map(|i| wt[(o + i) * rows + r]);
                axpy_sum4(&mut dcols[r * width..][..width], a, dy4);
            }
        }
        for o in blocked..g.c_out {
            let (taps, w0) = taps(g, o);
            let dyo = &dyc[o * width..][..width];
            for (j, r) in taps.enumerate() {
                axpy(&mut dcols[r * width..][..width], wt[w0 + j], dyo);
            }
        }
        col2im(&dcols, g, s0, s1, &mut dx);
    }
    dx
}

/// Gradient of a convolution with respect to its kernel.
pub(crate) fn conv_backward_weight(dy: &[f64], x: &[f64], g: &ConvGeom, len: usize) -> Vec<f64> {
    let op = g.out_plane();
    let mut dw = vec![0.0; len];
    let mut cols = Vec::new();
    let mut dyc = Vec::new();
    for (s0, s1) in sample_groups(g) {
        let width = (s1 - s0) * op;
        im2col(x, g, s0, s1, &mut cols);
        gather_outputs(dy, g, s0, s1, &mut dyc);
        for o in 0..g.c_out {
            let (taps, w0) = taps(g, o);
            let dyo = &dyc[o * width..][..width];
            for (j, r) in taps.enumerate() {
                dw[w0 + j] += dot(dyo, &cols[r * width..][..width]);
            }
        }
    }
    dw
}
