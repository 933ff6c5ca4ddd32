//! Forward and backward kernels over raw buffers. The graph in
//! [`crate::autodiff`] records these; nothing here tracks gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub ks: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, kernel: Shape, stride: usize, pad: usize) -> Result<Self> {
        if stride < 1 {
            return Err(Error::param("conv2d", "stride must be >= 1"));
        }
        if kernel.h != kernel.w {
            return Err(Error::shape("conv2d", format!("kernel {kernel} is not square")));
        }
        if kernel.c != input.c {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {} input channels, input {input} has {}", kernel.c, input.c),
            ));
        }
        let ks = kernel.h;
        if input.h + 2 * pad < ks || input.w + 2 * pad < ks {
            return Err(Error::shape(
                "conv2d",
                format!("kernel size {ks} exceeds padded input {input} (pad {pad})"),
            ));
        }
        let oh = (input.h + 2 * pad - ks) / stride + 1;
        let ow = (input.w + 2 * pad - ks) / stride + 1;
        Ok(ConvGeometry { c_in: input.c, c_out: kernel.b, ks, stride, pad, h: input.h, w: input.w, oh, ow })
    }

    fn patch(&self) -> usize {
        self.c_in * self.ks * self.ks
    }

    fn is_pointwise(&self) -> bool {
        self.ks == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unrolls one image (`c_in x h x w`) into a `(c_in*ks*ks) x (oh*ow)` matrix.
fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let plane_out = g.oh * g.ow;
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.ks {
            for kx in 0..g.ks {
                let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into `dx`.
fn col2im_add<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let plane_out = g.oh * g.ow;
    let mut row = 0;
    for c in 0..g.c_in {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.ks {
            for kx in 0..g.ks {
                let src = &cols[row * plane_out..(row + 1) * plane_out];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dxc[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation with zero padding. `bias` holds `c_out` values.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor4<T>> {
    let g = ConvGeometry::new(x.shape(), kernel.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries, kernel has {} outputs", b.len(), g.c_out),
            ));
        }
    }
    let batch = x.shape().b;
    let out_shape = Shape::new(batch, g.c_out, g.oh, g.ow);
    let mut out = vec![T::zero(); out_shape.numel()];
    let plane_in = g.c_in * g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.patch() * plane_out] };
    for bi in 0..batch {
        let xb = &x.data()[bi * plane_in..(bi + 1) * plane_in];
        let ob = &mut out[bi * g.c_out * plane_out..(bi + 1) * g.c_out * plane_out];
        if let Some(b) = bias {
            for (co, chunk) in ob.chunks_mut(plane_out).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let rhs: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(&g, xb, &mut cols);
            &cols
        };
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(g.c_out, g.patch(), plane_out, T::one(), kernel.data(), false, rhs, false, beta, ob);
    }
    Tensor4::from_vec(out_shape, out)
}

/// Gradients of [`conv2d_forward`]. Each output slot is accumulated into
/// when present.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    stride: usize,
    pad: usize,
    grad_out: &[T],
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    db: Option<&mut [T]>,
) -> Result<()> {
    let g = ConvGeometry::new(x.shape(), kernel.shape(), stride, pad)?;
    let batch = x.shape().b;
    let plane_in = g.c_in * g.h * g.w;
    let plane_out = g.oh * g.ow;
    let patch = g.patch();
    let mut cols = vec![T::zero(); patch * plane_out];
    for bi in 0..batch {
        let gb = &grad_out[bi * g.c_out * plane_out..(bi + 1) * g.c_out * plane_out];
        if let Some(dk) = dk.as_deref_mut() {
            let xb = &x.data()[bi * plane_in..(bi + 1) * plane_in];
            let rhs: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(&g, xb, &mut cols);
                &cols
            };
            // dK (c_out x patch) += G (c_out x P) * cols^T (P x patch)
            T::gemm(g.c_out, plane_out, patch, T::one(), gb, false, rhs, true, T::one(), dk);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[bi * plane_in..(bi + 1) * plane_in];
            if g.is_pointwise() {
                T::gemm(patch, g.c_out, plane_out, T::one(), kernel.data(), true, gb, false, T::one(), dxb);
            } else {
                T::gemm(patch, g.c_out, plane_out, T::one(), kernel.data(), true, gb, false, T::zero(), &mut cols);
                col2im_add(&g, &cols, dxb);
            }
        }
    }
    if let Some(db) = db {
        for bi in 0..batch {
            for co in 0..g.c_out {
                let off = (bi * g.c_out + co) * plane_out;
                let s: T = grad_out[off..off + plane_out].iter().copied().sum();
                db[co] += s;
            }
        }
    }
    Ok(())
}

/// Per-axis interpolation taps for half-pixel-center bilinear resizing.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = libm::floor(s) as usize;
            let hi = (lo + 1).min(src - 1);
            Tap { lo, hi, frac: s - lo as f64 }
        })
        .collect()
}

/// Source index for nearest resizing: `floor((dst + 0.5) * src / dst)`.
pub fn nearest_index(src: usize, dst: usize, d: usize) -> usize {
    let s = libm::floor((d as f64 + 0.5) * src as f64 / dst as f64) as usize;
    s.min(src - 1)
}

fn check_resize(op: &'static str, x: Shape, oh: usize, ow: usize) -> Result<()> {
    if oh == 0 || ow == 0 {
        return Err(Error::param(op, format!("output size {oh}x{ow} must be at least 1x1")));
    }
    if x.h == 0 || x.w == 0 {
        return Err(Error::shape(op, format!("input {x} has an empty plane")));
    }
    Ok(())
}

pub fn resize_bilinear_forward<T: Scalar>(x: &Tensor4<T>, oh: usize, ow: usize) -> Result<Tensor4<T>> {
    let s = x.shape();
    check_resize("resize_bilinear", s, oh, ow)?;
    let ty = bilinear_taps(s.h, oh);
    let tx = bilinear_taps(s.w, ow);
    let out_shape = Shape::new(s.b, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in x.data().chunks(s.plane()) {
        for y in &ty {
            let fy = T::of(y.frac);
            let r0 = &plane[y.lo * s.w..(y.lo + 1) * s.w];
            let r1 = &plane[y.hi * s.w..(y.hi + 1) * s.w];
            for t in &tx {
                let fx = T::of(t.frac);
                let top = r0[t.lo] + (r0[t.hi] - r0[t.lo]) * fx;
                let bot = r1[t.lo] + (r1[t.hi] - r1[t.lo]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    Tensor4::from_vec(out_shape, out)
}

pub fn resize_bilinear_backward<T: Scalar>(in_shape: Shape, oh: usize, ow: usize, grad_out: &[T], dx: &mut [T]) {
    let ty = bilinear_taps(in_shape.h, oh);
    let tx = bilinear_taps(in_shape.w, ow);
    let plane = in_shape.plane();
    for (p, gplane) in grad_out.chunks(oh * ow).enumerate() {
        let d = &mut dx[p * plane..(p + 1) * plane];
        for (yi, y) in ty.iter().enumerate() {
            let fy = T::of(y.frac);
            for (xi, t) in tx.iter().enumerate() {
                let fx = T::of(t.frac);
                let gv = gplane[yi * ow + xi];
                let top = gv * (T::one() - fy);
                let bot = gv * fy;
                d[y.lo * in_shape.w + t.lo] += top * (T::one() - fx);
                d[y.lo * in_shape.w + t.hi] += top * fx;
                d[y.hi * in_shape.w + t.lo] += bot * (T::one() - fx);
                d[y.hi * in_shape.w + t.hi] += bot * fx;
            }
        }
    }
}

pub fn resize_nearest_forward<T: Scalar>(x: &Tensor4<T>, oh: usize, ow: usize) -> Result<Tensor4<T>> {
    let s = x.shape();
    check_resize("resize_nearest", s, oh, ow)?;
    let iy: Vec<usize> = (0..oh).map(|d| nearest_index(s.h, oh, d)).collect();
    let ix: Vec<usize> = (0..ow).map(|d| nearest_index(s.w, ow, d)).collect();
    let out_shape = Shape::new(s.b, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in x.data().chunks(s.plane()) {
        for &y in &iy {
            for &xx in &ix {
                out.push(plane[y * s.w + xx]);
            }
        }
    }
    Tensor4::from_vec(out_shape, out)
}

pub fn resize_nearest_backward<T: Scalar>(in_shape: Shape, oh: usize, ow: usize, grad_out: &[T], dx: &mut [T]) {
    let plane = in_shape.plane();
    for (p, gplane) in grad_out.chunks(oh * ow).enumerate() {
        let d = &mut dx[p * plane..(p + 1) * plane];
        for y in 0..oh {
            let sy = nearest_index(in_shape.h, oh, y);
            for x in 0..ow {
                let sx = nearest_index(in_shape.w, ow, x);
                d[sy * in_shape.w + sx] += gplane[y * ow + x];
            }
        }
    }
}

/// Channel-group boundaries for adaptive channel pooling: `c` channels into
/// `n` contiguous groups, the first `c % n` groups one channel larger.
pub fn channel_groups(c: usize, n: usize) -> Vec<(usize, usize)> {
    let base = c / n;
    let extra = c % n;
    let mut start = 0;
    (0..n)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let g = (start, len);
            start += len;
            g
        })
        .collect()
}
