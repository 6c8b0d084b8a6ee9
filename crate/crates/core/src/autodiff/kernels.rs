//! Dense CPU kernels behind the graph ops. Layouts are channels-first
//! `(C, D, H, W)` for volumes and row-major `(rows, cols)` for matrices.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(in_dims: [usize; 3], kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let padded = in_dims[a] + 2 * pad;
            if padded < kernel {
                return None;
            }
            out_dims[a] = (padded - kernel) / stride + 1;
        }
        Some(Self { in_dims, out_dims, kernel, stride, pad })
    }

    fn in_voxels(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Input coordinate for output coordinate `o` and kernel tap `k`, if in bounds.
    #[inline]
    fn src(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < self.in_dims[axis]).then_some(i as usize)
    }

    /// Half-open range of output columns whose source column for tap `k` is in bounds.
    #[inline]
    fn valid_cols(&self, k: usize) -> (usize, usize) {
        let (s, p, w_in, w_out) = (self.stride, self.pad, self.in_dims[2], self.out_dims[2]);
        // o*s + k - p >= 0  and  o*s + k - p < w_in
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if w_in + p > k { ((w_in + p - k - 1) / s + 1).min(w_out) } else { 0 };
        (lo, hi.max(lo))
    }
}

/// Dense 3-D convolution. `w` has shape `(co, ci, k, k, k)`.
pub fn conv3d_forward(x: &[f64], w: &[f64], ci: usize, co: usize, g: &ConvGeom) -> Vec<f64> {
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let [_, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let (in_vox, out_vox, k3) = (g.in_voxels(), g.out_voxels(), k * k * k);
    let mut out = vec![0.0; co * out_vox];
    for o in 0..co {
        for z in 0..od {
            for y in 0..oh {
                let row0 = o * out_vox + (z * oh + y) * ow;
                let out_row = &mut out[row0..row0 + ow];
                for c in 0..ci {
                    let wbase = (o * ci + c) * k3;
                    for kd in 0..k {
                        let Some(sz) = g.src(0, z, kd) else { continue };
                        for kh in 0..k {
                            let Some(sy) = g.src(1, y, kh) else { continue };
                            let in_row = &x[c * in_vox + (sz * ih + sy) * iw..][..iw];
                            for kw in 0..k {
                                let wv = w[wbase + (kd * k + kh) * k + kw];
                                let (lo, hi) = g.valid_cols(kw);
                                if s == 1 {
                                    let src = &in_row[lo + kw - p..hi + kw - p];
                                    for (acc, xv) in out_row[lo..hi].iter_mut().zip(src) {
                                        *acc += wv * xv;
                                    }
                                } else {
                                    for (oc, acc) in out_row.iter_mut().enumerate().take(hi).skip(lo) {
                                        *acc += wv * in_row[oc * s + kw - p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input and weight gradients of [`conv3d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    ci: usize,
    co: usize,
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let [_, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let (in_vox, out_vox, k3) = (g.in_voxels(), g.out_voxels(), k * k * k);
    for o in 0..co {
        for z in 0..od {
            for y in 0..oh {
                let row0 = o * out_vox + (z * oh + y) * ow;
                let grow = &dout[row0..row0 + ow];
                for c in 0..ci {
                    let wbase = (o * ci + c) * k3;
                    for kd in 0..k {
                        let Some(sz) = g.src(0, z, kd) else { continue };
                        for kh in 0..k {
                            let Some(sy) = g.src(1, y, kh) else { continue };
                            let in0 = c * in_vox + (sz * ih + sy) * iw;
                            for kw in 0..k {
                                let widx = wbase + (kd * k + kh) * k + kw;
                                let (lo, hi) = g.valid_cols(kw);
                                if lo >= hi {
                                    continue;
                                }
                                if let Some(dx) = dx.as_deref_mut() {
                                    let wv = w[widx];
                                    let drow = &mut dx[in0..in0 + iw];
                                    if s == 1 {
                                        for (d, gv) in drow[lo + kw - p..hi + kw - p].iter_mut().zip(&grow[lo..hi]) {
                                            *d += wv * gv;
                                        }
                                    } else {
                                        for (oc, gv) in grow.iter().enumerate().take(hi).skip(lo) {
                                            drow[oc * s + kw - p] += wv * gv;
                                        }
                                    }
                                }
                                if let Some(dw) = dw.as_deref_mut() {
                                    let xrow = &x[in0..in0 + iw];
                                    let mut acc = 0.0;
                                    if s == 1 {
                                        for (gv, xv) in grow[lo..hi].iter().zip(&xrow[lo + kw - p..hi + kw - p]) {
                                            acc += gv * xv;
                                        }
                                    } else {
                                        for (oc, gv) in grow.iter().enumerate().take(hi).skip(lo) {
                                            acc += gv * xrow[oc * s + kw - p];
                                        }
                                    }
                                    dw[widx] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise stride-1 convolution. `w` has shape `(c, k, k, k)`.
pub fn depthwise_forward(x: &[f64], w: &[f64], c: usize, g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.kernel, g.pad);
    let [_, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let (in_vox, out_vox, k3) = (g.in_voxels(), g.out_voxels(), k * k * k);
    let mut out = vec![0.0; c * out_vox];
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let row0 = ch * out_vox + (z * oh + y) * ow;
                let out_row = &mut out[row0..row0 + ow];
                for kd in 0..k {
                    let Some(sz) = g.src(0, z, kd) else { continue };
                    for kh in 0..k {
                        let Some(sy) = g.src(1, y, kh) else { continue };
                        let in_row = &x[ch * in_vox + (sz * ih + sy) * iw..][..iw];
                        for kw in 0..k {
                            let wv = w[ch * k3 + (kd * k + kh) * k + kw];
                            let (lo, hi) = g.valid_cols(kw);
                            if lo >= hi {
                                continue;
                            }
                            for (acc, xv) in out_row[lo..hi].iter_mut().zip(&in_row[lo + kw - p..hi + kw - p]) {
                                *acc += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    c: usize,
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let (k, p) = (g.kernel, g.pad);
    let [_, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let (in_vox, out_vox, k3) = (g.in_voxels(), g.out_voxels(), k * k * k);
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let row0 = ch * out_vox + (z * oh + y) * ow;
                let grow = &dout[row0..row0 + ow];
                for kd in 0..k {
                    let Some(sz) = g.src(0, z, kd) else { continue };
                    for kh in 0..k {
                        let Some(sy) = g.src(1, y, kh) else { continue };
                        let in0 = ch * in_vox + (sz * ih + sy) * iw;
                        for kw in 0..k {
                            let widx = ch * k3 + (kd * k + kh) * k + kw;
                            let (lo, hi) = g.valid_cols(kw);
                            if lo >= hi {
                                continue;
                            }
                            let (a, b) = (lo + kw - p, hi + kw - p);
                            if let Some(dx) = dx.as_deref_mut() {
                                let wv = w[widx];
                                for (d, gv) in dx[in0 + a..in0 + b].iter_mut().zip(&grow[lo..hi]) {
                                    *d += wv * gv;
                                }
                            }
                            if let Some(dw) = dw.as_deref_mut() {
                                let mut acc = 0.0;
                                for (gv, xv) in grow[lo..hi].iter().zip(&x[in0 + a..in0 + b]) {
                                    acc += gv * xv;
                                }
                                dw[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out (m, n) += a (m, k) · b (k, n)`.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if *av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out (m, n) += a (m, k) · b (n, k)ᵀ`.
pub fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out (k, n) += a (m, k)ᵀ · b (m, n)`.
pub fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (kk, av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if *av == 0.0 {
                continue;
            }
            for (o, bv) in out[kk * n..(kk + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Source taps for doubling one axis: `(i0, i1, w0, w1)` per output index.
pub fn upsample_taps(n: usize, linear: bool) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            if !linear {
                return (o / 2, o / 2, 1.0, 0.0);
            }
            // half-pixel centres, edge clamped
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// Splits a shape into `(outer, axis_len, inner)` around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn upsample_axis_forward(
    x: &[f64],
    (outer, n, inner): (usize, usize, usize),
    taps: &[(usize, usize, f64, f64)],
) -> Vec<f64> {
    let m = taps.len();
    let mut out = vec![0.0; outer * m * inner];
    for o in 0..outer {
        for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let dst = &mut out[(o * m + j) * inner..][..inner];
            let a = &x[(o * n + i0) * inner..][..inner];
            let b = &x[(o * n + i1) * inner..][..inner];
            for ((d, av), bv) in dst.iter_mut().zip(a).zip(b) {
                *d = w0 * av + w1 * bv;
            }
        }
    }
    out
}

pub fn upsample_axis_backward(
    dout: &[f64],
    dx: &mut [f64],
    (outer, n, inner): (usize, usize, usize),
    taps: &[(usize, usize, f64, f64)],
) {
    let m = taps.len();
    for o in 0..outer {
        for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let src = &dout[(o * m + j) * inner..][..inner];
            for (t, wt) in [(i0, w0), (i1, w1)] {
                if wt == 0.0 {
                    continue;
                }
                let d = &mut dx[(o * n + t) * inner..][..inner];
                for (dv, g) in d.iter_mut().zip(src) {
                    *dv += wt * g;
                }
            }
        }
    }
}
