//! Raw forward/backward kernels over row-major slices.
//!
//! Everything here is free of graph bookkeeping so that the same kernels can
//! be reused by the autodiff engine, by plain inference code and by the
//! benchmarks. Layouts are NCHW for activations and `[K, C, kh, kw]` for
//! convolution weights.

use std::borrow::Cow;

use crate::error::{ensure_dim, Error, Result};
use crate::par;
use crate::tensor::Scalar;

#[inline]
fn axpy<T: Scalar>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Dot product with a fixed 8-lane accumulation order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        ensure_dim!(x.len() == 4, "conv input must be NCHW, got {:?}", x);
        ensure_dim!(weight.len() == 4, "conv weight must be KCHW, got {:?}", weight);
        ensure_dim!(stride >= 1, "conv stride must be positive");
        let (n, c, h, w) = (x[0], x[1], x[2], x[3]);
        let (k, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        ensure_dim!(wc == c, "conv channel mismatch: input has {c} channels, weight expects {wc}");
        ensure_dim!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
        );
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_image(&self) -> usize {
        self.c * self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.k, self.oh, self.ow]
    }
}

fn im2col<'a, T: Scalar>(x: &'a [T], g: &ConvGeom) -> Cow<'a, [T]> {
    if g.is_pointwise() {
        return Cow::Borrowed(x);
    }
    let plane = g.out_plane();
    let mut col = vec![T::zero(); g.ckk() * plane];
    for c in 0..g.c {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = srow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Cow::Owned(col)
}

/// Scatter-add the rows of one channel's column block back into that channel.
fn col2im_channel<T: Scalar>(col: &[T], g: &ConvGeom, c: usize, dst: &mut [T]) {
    let plane = g.out_plane();
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let row = (c * g.kh + ky) * g.kw + kx;
            let src = &col[row * plane..(row + 1) * plane];
            for oy in 0..g.oh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                let srow = &src[oy * g.ow..(oy + 1) * g.ow];
                for (ox, &v) in srow.iter().enumerate() {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && ix < g.w as isize {
                        drow[ix as usize] += v;
                    }
                }
            }
        }
    }
}

/// `out[n,k] = bias[k] + sum_c weight[k,c] * x[n,c]` (cross-correlation).
pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let ckk = g.ckk();
    let mut out = vec![T::zero(); g.n * g.k * plane];
    for n in 0..g.n {
        let xn = &x[n * g.in_image()..(n + 1) * g.in_image()];
        let col = im2col(xn, g);
        let on = &mut out[n * g.k * plane..(n + 1) * g.k * plane];
        par::chunks_mut(on, plane, g.k * ckk * plane, |k, row| {
            if let Some(b) = bias {
                row.fill(b[k]);
            }
            let wk = &weight[k * ckk..(k + 1) * ckk];
            for (j, &a) in wk.iter().enumerate() {
                if a != T::zero() {
                    axpy(row, a, &col[j * plane..(j + 1) * plane]);
                }
            }
        });
    }
    out
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_input_grad<T: Scalar>(weight: &[T], dout: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let ckk = g.ckk();
    let mut dx = vec![T::zero(); g.n * g.in_image()];
    let mut dcol = vec![T::zero(); ckk * plane];
    for n in 0..g.n {
        let dn = &dout[n * g.k * plane..(n + 1) * g.k * plane];
        let dxn = &mut dx[n * g.in_image()..(n + 1) * g.in_image()];
        let target: &mut [T] = if g.is_pointwise() { dxn } else { &mut dcol };
        par::chunks_mut(target, plane, g.k * ckk * plane, |j, row| {
            row.fill(T::zero());
            for k in 0..g.k {
                let a = weight[k * ckk + j];
                if a != T::zero() {
                    axpy(row, a, &dn[k * plane..(k + 1) * plane]);
                }
            }
        });
        if !g.is_pointwise() {
            let hw = g.h * g.w;
            let dcol_ref = &dcol;
            par::chunks_mut(dxn, hw, ckk * plane, |c, dst| col2im_channel(dcol_ref, g, c, dst));
        }
    }
    dx
}

/// Gradient of a convolution with respect to its weight.
pub fn conv2d_weight_grad<T: Scalar>(x: &[T], dout: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let ckk = g.ckk();
    let cols: Vec<Cow<[T]>> = (0..g.n).map(|n| im2col(&x[n * g.in_image()..(n + 1) * g.in_image()], g)).collect();
    let mut dw = vec![T::zero(); g.k * ckk];
    par::chunks_mut(&mut dw, ckk, g.n * g.k * ckk * plane, |k, dwk| {
        for (n, col) in cols.iter().enumerate() {
            let dk = &dout[(n * g.k + k) * plane..(n * g.k + k + 1) * plane];
            for (j, d) in dwk.iter_mut().enumerate() {
                *d += dot(dk, &col[j * plane..(j + 1) * plane]);
            }
        }
    });
    dw
}

/// Per-channel sum over batch and space (bias gradient).
pub fn channel_sum<T: Scalar>(dout: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for i in 0..n {
        for (ch, d) in db.iter_mut().enumerate() {
            let s: T = dout[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().copied().sum();
            *d += s;
        }
    }
    db
}

/// Transposed convolution with kernel 4, stride 2, padding 1: doubles H and W.
///
/// `weight` is laid out `[C_in, C_out, 4, 4]`. Implemented as the adjoint of
/// the matching strided convolution from the `2H x 2W` output space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeconvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

pub const DECONV_KERNEL: usize = 4;
pub const DECONV_STRIDE: usize = 2;
pub const DECONV_PAD: usize = 1;

impl DeconvGeom {
    pub fn new(x: &[usize], weight: &[usize], stride: usize) -> Result<Self> {
        ensure_dim!(x.len() == 4, "deconv input must be NCHW, got {:?}", x);
        ensure_dim!(weight.len() == 4, "deconv weight must be [Cin,Cout,kh,kw], got {:?}", weight);
        if stride != DECONV_STRIDE || weight[2] != DECONV_KERNEL || weight[3] != DECONV_KERNEL {
            return Err(Error::Config(format!(
                "deconv must be kernel 4, stride 2, padding 1 to double spatial size; got kernel {}x{}, stride {}",
                weight[2], weight[3], stride
            )));
        }
        ensure_dim!(
            weight[0] == x[1],
            "deconv channel mismatch: input has {} channels, weight expects {}",
            x[1],
            weight[0]
        );
        Ok(DeconvGeom {
            n: x[0],
            cin: x[1],
            cout: weight[1],
            h: x[2],
            w: x[3],
        })
    }

    /// The forward convolution this deconvolution is the adjoint of.
    pub fn adjoint_conv(&self) -> ConvGeom {
        ConvGeom {
            n: self.n,
            c: self.cout,
            h: 2 * self.h,
            w: 2 * self.w,
            k: self.cin,
            kh: DECONV_KERNEL,
            kw: DECONV_KERNEL,
            stride: DECONV_STRIDE,
            pad: DECONV_PAD,
            oh: self.h,
            ow: self.w,
        }
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, 2 * self.h, 2 * self.w]
    }
}

pub fn deconv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &DeconvGeom) -> Vec<T> {
    let conv = g.adjoint_conv();
    let mut out = conv2d_input_grad(weight, x, &conv);
    if let Some(b) = bias {
        let plane = 4 * g.h * g.w;
        for n in 0..g.n {
            for (c, &bc) in b.iter().enumerate() {
                for v in &mut out[(n * g.cout + c) * plane..(n * g.cout + c + 1) * plane] {
                    *v += bc;
                }
            }
        }
    }
    out
}

pub fn deconv2d_input_grad<T: Scalar>(weight: &[T], dout: &[T], g: &DeconvGeom) -> Vec<T> {
    conv2d_forward(dout, weight, None, &g.adjoint_conv())
}

pub fn deconv2d_weight_grad<T: Scalar>(x: &[T], dout: &[T], g: &DeconvGeom) -> Vec<T> {
    conv2d_weight_grad(dout, x, &g.adjoint_conv())
}

/// 2x2 / stride-2 max pooling. Returns the pooled values and, per output, the
/// flat index of the winning input within its `(n, c)` plane. Ties go to the
/// first element in row-major window order.
pub fn maxpool2_forward<T: Scalar>(x: &[T], shape: [usize; 4]) -> Result<(Vec<T>, Vec<u32>)> {
    let [n, c, h, w] = shape;
    ensure_dim!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even H and W, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward<T: Scalar>(dout: &[T], arg: &[u32], shape: [usize; 4]) -> Vec<T> {
    let [n, c, h, w] = shape;
    let plane_out = (h / 2) * (w / 2);
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        for i in 0..plane_out {
            dx[p * h * w + arg[p * plane_out + i] as usize] += dout[p * plane_out + i];
        }
    }
    dx
}

pub fn upsample2_forward<T: Scalar>(x: &[T], shape: [usize; 4]) -> Vec<T> {
    let [n, c, h, w] = shape;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xo in 0..ow {
                dst[y * ow + xo] = src[(y / 2) * w + xo / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dout: &[T], shape: [usize; 4]) -> Vec<T> {
    let [n, c, h, w] = shape;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                dst[(y / 2) * w + xo / 2] += src[y * ow + xo];
            }
        }
    }
    dx
}

/// One axis of a half-pixel-centre bilinear resize: `(low, high, frac)` per
/// output index.
pub fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn resize_forward<T: Scalar>(x: &[T], shape: [usize; 4], out_h: usize, out_w: usize) -> Vec<T> {
    let [n, c, h, w] = shape;
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, hy) = (T::lit(ly), T::lit(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, hx) = (T::lit(lx), T::lit(1.0 - lx));
                dst[oy * out_w + ox] =
                    hy * (hx * src[y0 * w + x0] + lx * src[y0 * w + x1]) + ly * (hx * src[y1 * w + x0] + lx * src[y1 * w + x1]);
            }
        }
    }
    out
}

pub fn resize_backward<T: Scalar>(dout: &[T], shape: [usize; 4], out_h: usize, out_w: usize) -> Vec<T> {
    let [n, c, h, w] = shape;
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &dout[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, hy) = (T::lit(ly), T::lit(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, hx) = (T::lit(lx), T::lit(1.0 - lx));
                let g = src[oy * out_w + ox];
                dst[y0 * w + x0] += hy * hx * g;
                dst[y0 * w + x1] += hy * lx * g;
                dst[y1 * w + x0] += ly * hx * g;
                dst[y1 * w + x1] += ly * lx * g;
            }
        }
    }
    dx
}

/// Precomputed bilinear taps for one RoI: per output cell, the list of
/// `(flat texel index, weight)` contributions, already divided by the number
/// of samples in the cell.
#[derive(Debug, Clone)]
pub struct RoiTaps<T> {
    cells: Vec<Vec<(u32, T)>>,
}

/// Configuration of a single RoIAlign extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiAlignSpec {
    pub stride: f64,
    pub out: usize,
    pub sampling_ratio: usize,
}

fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, weight: f64, taps: &mut Vec<(u32, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1, yy, xx);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        yy = y0 as f64;
    } else {
        y1 = y0 + 1;
        yy = y;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        xx = x0 as f64;
    } else {
        x1 = x0 + 1;
        xx = x;
    }
    let ly = yy - y0 as f64;
    let lx = xx - x0 as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    taps.push(((y0 * w + x0) as u32, weight * hy * hx));
    taps.push(((y0 * w + x1) as u32, weight * hy * lx));
    taps.push(((y1 * w + x0) as u32, weight * ly * hx));
    taps.push(((y1 * w + x1) as u32, weight * ly * lx));
}

/// Build the sampling taps for `box_xyxy` (image pixels) on an `h x w` map.
///
/// The box is mapped to feature coordinates by dividing by the stride, with
/// texel `j` centred at `j + 0.5`. Each output cell averages
/// `sampling_ratio^2` bilinear samples placed at regular sub-cell positions.
/// A box with zero width or height degrades to a single point lookup at its
/// centre.
pub fn roi_taps<T: Scalar>(box_xyxy: [f64; 4], h: usize, w: usize, spec: &RoiAlignSpec) -> RoiTaps<T> {
    let s = spec.out;
    let sr = spec.sampling_ratio.max(1);
    let x0 = box_xyxy[0] / spec.stride - 0.5;
    let y0 = box_xyxy[1] / spec.stride - 0.5;
    let rw = (box_xyxy[2] - box_xyxy[0]) / spec.stride;
    let rh = (box_xyxy[3] - box_xyxy[1]) / spec.stride;
    let degenerate = !(rw > 0.0 && rh > 0.0);
    let mut cells = Vec::with_capacity(s * s);
    let mut scratch = Vec::with_capacity(4 * sr * sr);
    for py in 0..s {
        for px in 0..s {
            scratch.clear();
            if degenerate {
                bilinear_taps(y0 + rh.max(0.0) / 2.0, x0 + rw.max(0.0) / 2.0, h, w, 1.0, &mut scratch);
            } else {
                let bh = rh / s as f64;
                let bw = rw / s as f64;
                let inv = 1.0 / (sr * sr) as f64;
                for iy in 0..sr {
                    let y = y0 + py as f64 * bh + (iy as f64 + 0.5) * bh / sr as f64;
                    for ix in 0..sr {
                        let x = x0 + px as f64 * bw + (ix as f64 + 0.5) * bw / sr as f64;
                        bilinear_taps(y, x, h, w, inv, &mut scratch);
                    }
                }
            }
            cells.push(scratch.iter().map(|&(i, wgt)| (i, T::lit(wgt))).collect());
        }
    }
    RoiTaps { cells }
}

/// RoIAlign over one image's feature map `[1, C, h, w]`; output `[R, C, S, S]`.
pub fn roialign_forward<T: Scalar>(feature: &[T], c: usize, h: usize, w: usize, taps: &[RoiTaps<T>], out: usize) -> Vec<T> {
    let cells = out * out;
    let mut y = vec![T::zero(); taps.len() * c * cells];
    par::chunks_mut(&mut y, cells, taps.len() * c * cells * 16, |rc, dst| {
        let (r, ch) = (rc / c, rc % c);
        let plane = &feature[ch * h * w..(ch + 1) * h * w];
        for (d, cell) in dst.iter_mut().zip(&taps[r].cells) {
            let mut acc = T::zero();
            for &(i, wgt) in cell {
                acc += wgt * plane[i as usize];
            }
            *d = acc;
        }
    });
    y
}

pub fn roialign_backward<T: Scalar>(dout: &[T], c: usize, h: usize, w: usize, taps: &[RoiTaps<T>], out: usize) -> Vec<T> {
    let cells = out * out;
    let mut dfeat = vec![T::zero(); c * h * w];
    par::chunks_mut(&mut dfeat, h * w, taps.len() * c * cells * 16, |ch, plane| {
        for (r, t) in taps.iter().enumerate() {
            let g = &dout[(r * c + ch) * cells..(r * c + ch + 1) * cells];
            for (&gv, cell) in g.iter().zip(&t.cells) {
                for &(i, wgt) in cell {
                    plane[i as usize] += wgt * gv;
                }
            }
        }
    });
    dfeat
}

/// `y[n, m] = b[m] + sum_d x[n, d] * w[m, d]`.
pub fn linear_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], n: usize, d: usize, m: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * m];
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        par::chunks_mut(&mut y[i * m..(i + 1) * m], 1, m * d, |j, out| {
            out[0] = b[j] + dot(xi, &w[j * d..(j + 1) * d]);
        });
    }
    y
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward<T: Scalar>(x: &[T], w: &[T], dy: &[T], n: usize, d: usize, m: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); n * d];
    for i in 0..n {
        let dxi = &mut dx[i * d..(i + 1) * d];
        for j in 0..m {
            axpy(dxi, dy[i * m + j], &w[j * d..(j + 1) * d]);
        }
    }
    let mut dw = vec![T::zero(); m * d];
    par::chunks_mut(&mut dw, d, n * m * d, |j, row| {
        for i in 0..n {
            axpy(row, dy[i * m + j], &x[i * d..(i + 1) * d]);
        }
    });
    let mut db = vec![T::zero(); m];
    for i in 0..n {
        for j in 0..m {
            db[j] += dy[i * m + j];
        }
    }
    (dx, dw, db)
}

/// Numerically stable softmax over each contiguous `plane`-sized block.
pub fn softmax_planes<T: Scalar>(logits: &[T], plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (src, dst) in logits.chunks(plane).zip(out.chunks_mut(plane)) {
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
}
