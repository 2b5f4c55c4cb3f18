//! Convolution kernels (im2col + GEMM) shared by the tape ops.

use crate::error::{Error, Result};
use crate::nn::real::matmul_acc;
use crate::nn::Real;

/// Border handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Zero,
    /// Wrap-around indexing; makes stride-1 layers exactly shift-equivariant.
    Circular,
}

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: Padding,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeom { kernel, stride, pad, mode: Padding::Zero }
    }

    pub fn circular(self) -> Self {
        ConvGeom { mode: Padding::Circular, ..self }
    }

    /// Output extent of a convolution over `len` input cells.
    pub fn conv_out(&self, len: usize) -> Result<usize> {
        let padded = len + 2 * self.pad;
        if self.stride == 0 || self.kernel == 0 || padded < self.kernel {
            return Err(Error::shape(
                "conv2d",
                format!("input extent {len} with kernel {} pad {}", self.kernel, self.pad),
            ));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution over `len` input cells.
    pub fn deconv_out(&self, len: usize) -> Result<usize> {
        let full = (len.max(1) - 1) * self.stride + self.kernel;
        if len == 0 || full < 2 * self.pad + 1 {
            return Err(Error::shape(
                "deconv2d",
                format!("input extent {len} with kernel {} pad {}", self.kernel, self.pad),
            ));
        }
        Ok(full - 2 * self.pad)
    }

    #[inline]
    fn source(&self, out_idx: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (out_idx * self.stride + k) as isize - self.pad as isize;
        if pos >= 0 && (pos as usize) < len {
            return Some(pos as usize);
        }
        match self.mode {
            Padding::Zero => None,
            Padding::Circular => Some(pos.rem_euclid(len as isize) as usize),
        }
    }
}

/// Unfolds one `[c, h, w]` image into a `[c·k·k, oh·ow]` column matrix.
pub(crate) fn im2col<T: Real>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    g: &ConvGeom,
    (oh, ow): (usize, usize),
    cols: &mut [T],
) {
    let k = g.kernel;
    let plane = oh * ow;
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..oh {
                    let ii = g.source(oi, ki, h);
                    for oj in 0..ow {
                        dst[oi * ow + oj] = match (ii, g.source(oj, kj, w)) {
                            (Some(i), Some(j)) => src[i * w + j],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
pub(crate) fn col2im<T: Real>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    g: &ConvGeom,
    (oh, ow): (usize, usize),
    x: &mut [T],
) {
    let k = g.kernel;
    let plane = oh * ow;
    for ch in 0..c {
        let dst = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..oh {
                    let Some(i) = g.source(oi, ki, h) else { continue };
                    for oj in 0..ow {
                        if let Some(j) = g.source(oj, kj, w) {
                            dst[i * w + j] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a conv2d call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_shape(x: [usize; 4], wshape: &[usize], g: &ConvGeom) -> Result<ConvShape> {
    let [n, cin, h, w] = x;
    if wshape.len() != 4 || wshape[1] != cin || wshape[2] != g.kernel || wshape[3] != g.kernel {
        return Err(Error::shape(
            "conv2d",
            format!("weight {wshape:?} incompatible with input channels {cin}, kernel {}", g.kernel),
        ));
    }
    Ok(ConvShape { n, cin, h, w, cout: wshape[0], oh: g.conv_out(h)?, ow: g.conv_out(w)? })
}

pub(crate) fn conv_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    s: &ConvShape,
    g: &ConvGeom,
) -> Vec<T> {
    let kk = s.cin * g.kernel * g.kernel;
    let plane = s.oh * s.ow;
    let mut out = vec![T::zero(); s.n * s.cout * plane];
    let mut cols = vec![T::zero(); kk * plane];
    for b in 0..s.n {
        let xin = &x[b * s.cin * s.h * s.w..(b + 1) * s.cin * s.h * s.w];
        let dst = &mut out[b * s.cout * plane..(b + 1) * s.cout * plane];
        if g.kernel == 1 && g.stride == 1 && g.pad == 0 {
            matmul_acc(s.cout, kk, plane, weight, false, xin, false, dst, T::zero());
        } else {
            im2col(xin, (s.cin, s.h, s.w), g, (s.oh, s.ow), &mut cols);
            matmul_acc(s.cout, kk, plane, weight, false, &cols, false, dst, T::zero());
        }
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                for v in &mut dst[o * plane..(o + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Returns `(dx, dweight, dbias)` for a conv2d given the output gradient.
pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    weight: &[T],
    gout: &[T],
    s: &ConvShape,
    g: &ConvGeom,
    need_x: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let kk = s.cin * g.kernel * g.kernel;
    let plane = s.oh * s.ow;
    let pointwise = g.kernel == 1 && g.stride == 1 && g.pad == 0;
    let mut dw = vec![T::zero(); s.cout * kk];
    let mut db = vec![T::zero(); s.cout];
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut cols = vec![T::zero(); kk * plane];
    let mut dcols = vec![T::zero(); kk * plane];
    for b in 0..s.n {
        let xin = &x[b * s.cin * s.h * s.w..(b + 1) * s.cin * s.h * s.w];
        let go = &gout[b * s.cout * plane..(b + 1) * s.cout * plane];
        for (o, d) in db.iter_mut().enumerate() {
            *d += go[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
        }
        let col_src: &[T] = if pointwise {
            xin
        } else {
            im2col(xin, (s.cin, s.h, s.w), g, (s.oh, s.ow), &mut cols);
            &cols
        };
        // dW += gout · colsᵀ
        matmul_acc(s.cout, plane, kk, go, false, col_src, true, &mut dw, T::one());
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * s.cin * s.h * s.w..(b + 1) * s.cin * s.h * s.w];
            if pointwise {
                matmul_acc(kk, s.cout, plane, weight, true, go, false, dxb, T::one());
            } else {
                matmul_acc(kk, s.cout, plane, weight, true, go, false, &mut dcols, T::zero());
                col2im(&dcols, (s.cin, s.h, s.w), g, (s.oh, s.ow), dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Geometry of a transposed convolution; weight layout `[cin, cout, k, k]`.
pub(crate) fn deconv_shape(x: [usize; 4], wshape: &[usize], g: &ConvGeom) -> Result<ConvShape> {
    let [n, cin, h, w] = x;
    if wshape.len() != 4 || wshape[0] != cin || wshape[2] != g.kernel || wshape[3] != g.kernel {
        return Err(Error::shape(
            "deconv2d",
            format!("weight {wshape:?} incompatible with input channels {cin}, kernel {}", g.kernel),
        ));
    }
    Ok(ConvShape { n, cin, h, w, cout: wshape[1], oh: g.deconv_out(h)?, ow: g.deconv_out(w)? })
}

pub(crate) fn deconv_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    s: &ConvShape,
    g: &ConvGeom,
) -> Vec<T> {
    let kk = s.cout * g.kernel * g.kernel;
    let plane_in = s.h * s.w;
    let plane_out = s.oh * s.ow;
    let mut out = vec![T::zero(); s.n * s.cout * plane_out];
    let mut cols = vec![T::zero(); kk * plane_in];
    for b in 0..s.n {
        let xin = &x[b * s.cin * plane_in..(b + 1) * s.cin * plane_in];
        // cols = Wᵀ · x, with W viewed as [cin, cout·k·k]
        matmul_acc(kk, s.cin, plane_in, weight, true, xin, false, &mut cols, T::zero());
        let dst = &mut out[b * s.cout * plane_out..(b + 1) * s.cout * plane_out];
        col2im(&cols, (s.cout, s.oh, s.ow), g, (s.h, s.w), dst);
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                for v in &mut dst[o * plane_out..(o + 1) * plane_out] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub(crate) fn deconv_backward<T: Real>(
    x: &[T],
    weight: &[T],
    gout: &[T],
    s: &ConvShape,
    g: &ConvGeom,
    need_x: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let kk = s.cout * g.kernel * g.kernel;
    let plane_in = s.h * s.w;
    let plane_out = s.oh * s.ow;
    let mut dw = vec![T::zero(); s.cin * kk];
    let mut db = vec![T::zero(); s.cout];
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut cols = vec![T::zero(); kk * plane_in];
    for b in 0..s.n {
        let xin = &x[b * s.cin * plane_in..(b + 1) * s.cin * plane_in];
        let go = &gout[b * s.cout * plane_out..(b + 1) * s.cout * plane_out];
        for (o, d) in db.iter_mut().enumerate() {
            *d += go[o * plane_out..(o + 1) * plane_out].iter().copied().sum::<T>();
        }
        im2col(go, (s.cout, s.oh, s.ow), g, (s.h, s.w), &mut cols);
        // dW += x · colsᵀ
        matmul_acc(s.cin, plane_in, kk, xin, false, &cols, true, &mut dw, T::one());
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * s.cin * plane_in..(b + 1) * s.cin * plane_in];
            matmul_acc(s.cin, kk, plane_in, weight, false, &cols, false, dxb, T::one());
        }
    }
    (dx, dw, db)
}

/// Bilinear source coordinate for upsampling by `factor` (half-pixel centers,
/// clamped at the border): returns `(i0, i1, frac)`.
#[inline]
pub(crate) fn bilinear_src(o: usize, factor: usize, len: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f64)
}
