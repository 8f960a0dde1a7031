//! 2-D cross-correlation over NCHW tensors and its two adjoints.
//!
//! The three kernels are the partial evaluations of one trilinear form
//! `<g, conv(x, w)>`, so the tape can differentiate each of them in terms of
//! the other two. That closure is what makes double backpropagation through
//! convolutional critics possible.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; padding split with the extra row/column at the end.
    Same,
    /// No padding.
    Valid,
}

/// Resolved spatial geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn resolve_axis(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if kernel > input {
                return Err(TensorError::InvalidShape {
                    shape: vec![input, kernel],
                    reason: "kernel larger than padded input".into(),
                });
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            if kernel > input + total {
                return Err(TensorError::InvalidShape {
                    shape: vec![input, kernel],
                    reason: "kernel larger than padded input".into(),
                });
            }
            Ok((out, total / 2))
        }
    }
}

impl ConvGeom {
    pub fn new(in_h: usize, in_w: usize, kernel_h: usize, kernel_w: usize, stride: usize, padding: Padding) -> Result<Self> {
        if stride == 0 {
            return Err(TensorError::InvalidShape {
                shape: vec![stride],
                reason: "stride must be at least 1".into(),
            });
        }
        let (out_h, pad_top) = resolve_axis(in_h, kernel_h, stride, padding)?;
        let (out_w, pad_left) = resolve_axis(in_w, kernel_w, stride, padding)?;
        Ok(ConvGeom { in_h, in_w, kernel_h, kernel_w, stride, pad_top, pad_left, out_h, out_w })
    }

    /// Extent of the zero-padded input that the kernel windows cover.
    fn padded(&self) -> (usize, usize) {
        ((self.out_h - 1) * self.stride + self.kernel_h, (self.out_w - 1) * self.stride + self.kernel_w)
    }
}

fn dims4(t: &Tensor, what: &'static str) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        other => Err(TensorError::InvalidShape {
            shape: other.to_vec(),
            reason: format!("{what} must be rank 4"),
        }),
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

/// Copy each `[h, w]` plane into a zero `[hp, wp]` plane at offset
/// `(pad_top, pad_left)`, dropping rows and columns the windows never reach.
fn pad_planes(x: &[f64], planes: usize, geom: &ConvGeom) -> Vec<f64> {
    let (h, w) = (geom.in_h, geom.in_w);
    let (hp, wp) = geom.padded();
    let (cols_lo, cols_hi) = (geom.pad_left, (geom.pad_left + w).min(wp));
    let mut out = vec![0.0; planes * hp * wp];
    for (src, dst) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(hp * wp)) {
        for (iy, row) in src.chunks_exact(w).enumerate() {
            let py = iy + geom.pad_top;
            if py >= hp {
                break;
            }
            dst[py * wp + cols_lo..py * wp + cols_hi].copy_from_slice(&row[..cols_hi - cols_lo]);
        }
    }
    out
}

/// Adjoint of [`pad_planes`]: crop the padded planes back to `[h, w]`.
fn crop_planes(padded: &[f64], planes: usize, geom: &ConvGeom) -> Vec<f64> {
    let (h, w) = (geom.in_h, geom.in_w);
    let (hp, wp) = geom.padded();
    let (cols_lo, cols_hi) = (geom.pad_left, (geom.pad_left + w).min(wp));
    let mut out = vec![0.0; planes * h * w];
    for (src, dst) in padded.chunks_exact(hp * wp).zip(out.chunks_exact_mut(h * w)) {
        for (iy, row) in dst.chunks_exact_mut(w).enumerate() {
            let py = iy + geom.pad_top;
            if py >= hp {
                break;
            }
            row[..cols_hi - cols_lo].copy_from_slice(&src[py * wp + cols_lo..py * wp + cols_hi]);
        }
    }
    out
}

/// Unfold `x` into a `[c·kh·kw, n·oh·ow]` matrix of input taps, zero where
/// a tap falls in the padding.
fn im2col(x: &[f64], n: usize, c: usize, geom: &ConvGeom) -> Vec<f64> {
    let (oh, ow, s) = (geom.out_h, geom.out_w, geom.stride);
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let (hp, wp) = geom.padded();
    let padded = pad_planes(x, n * c, geom);
    let mut cols = Vec::with_capacity(c * kh * kw * n * oh * ow);
    for ic in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                for b in 0..n {
                    let plane = &padded[(b * c + ic) * hp * wp..][..hp * wp];
                    for oy in 0..oh {
                        let src = &plane[(oy * s + ki) * wp + kj..];
                        if s == 1 {
                            cols.extend_from_slice(&src[..ow]);
                        } else {
                            cols.extend(src.iter().step_by(s).take(ow));
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add the taps back onto the input grid.
fn col2im(cols: &[f64], n: usize, c: usize, geom: &ConvGeom) -> Vec<f64> {
    let (oh, ow, s) = (geom.out_h, geom.out_w, geom.stride);
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let (hp, wp) = geom.padded();
    let mut padded = vec![0.0; n * c * hp * wp];
    let mut taps = cols.chunks_exact(ow);
    for ic in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                for b in 0..n {
                    let plane = &mut padded[(b * c + ic) * hp * wp..][..hp * wp];
                    for oy in 0..oh {
                        let src = taps.next().expect("column count matches geometry");
                        let dst = &mut plane[(oy * s + ki) * wp + kj..];
                        for (acc, &v) in dst.iter_mut().step_by(s).zip(src) {
                            *acc += v;
                        }
                    }
                }
            }
        }
    }
    crop_planes(&padded, n * c, geom)
}

/// Row-major `[m, k] · [k, n]` where each operand is addressed through its
/// own (row, column) strides.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (usize, usize), b: &[f64], b_strides: (usize, usize)) -> Vec<f64> {
    if m == 0 || k == 0 || n == 0 {
        return vec![0.0; m * n];
    }
    assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    let mut out = Vec::with_capacity(m * n);
    // SAFETY: the asserted extents keep every strided read inside `a` and
    // `b`; with beta = 0 the kernel writes all `m × n` outputs without
    // reading them, after which the length is set.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
        out.set_len(m * n);
    }
    out
}

/// `[n, o, s]` to `[o, n·s]`, or back with `inverse`.
fn swap_leading(data: &[f64], n: usize, o: usize, s: usize, inverse: bool) -> Vec<f64> {
    if n == 1 || o == 1 {
        return data.to_vec();
    }
    let (outer, inner) = if inverse { (n, o) } else { (o, n) };
    let mut out = Vec::with_capacity(data.len());
    for i in 0..outer {
        for j in 0..inner {
            let src = (j * outer + i) * s;
            out.extend_from_slice(&data[src..src + s]);
        }
    }
    out
}

/// `y[n,o] = Σ_c x[n,c] ⋆ w[o,c]`.
pub fn conv2d(x: &Tensor, w: &Tensor, geom: &ConvGeom) -> Result<Tensor> {
    let [n, c, h, wd] = dims4(x, "conv2d input")?;
    let [o, wc, kh, kw] = dims4(w, "conv2d kernel")?;
    if wc != c || h != geom.in_h || wd != geom.in_w || kh != geom.kernel_h || kw != geom.kernel_w {
        return Err(mismatch("conv2d", x, w));
    }
    let s = geom.out_h * geom.out_w;
    let ckk = c * kh * kw;
    let p = n * s;
    let cols = im2col(x.data(), n, c, geom);
    let y = gemm(o, ckk, p, w.data(), (ckk, 1), &cols, (p, 1));
    Ok(Tensor::from_parts(vec![n, o, geom.out_h, geom.out_w], swap_leading(&y, n, o, s, true)))
}

/// Adjoint of [`conv2d`] in its input: `<conv2d_input_grad(g, w), h> = <g, conv2d(h, w)>`.
pub fn conv2d_input_grad(g: &Tensor, w: &Tensor, geom: &ConvGeom) -> Result<Tensor> {
    let [n, o, oh, ow] = dims4(g, "conv2d output gradient")?;
    let [wo, c, kh, kw] = dims4(w, "conv2d kernel")?;
    if wo != o || oh != geom.out_h || ow != geom.out_w || kh != geom.kernel_h || kw != geom.kernel_w {
        return Err(mismatch("conv2d_input_grad", g, w));
    }
    let s = oh * ow;
    let ckk = c * kh * kw;
    let p = n * s;
    let gm = swap_leading(g.data(), n, o, s, false);
    let cols = gemm(ckk, o, p, w.data(), (1, ckk), &gm, (p, 1));
    Ok(Tensor::from_parts(vec![n, c, geom.in_h, geom.in_w], col2im(&cols, n, c, geom)))
}

/// Adjoint of [`conv2d`] in its kernel: `<conv2d_weight_grad(x, g), k> = <g, conv2d(x, k)>`.
pub fn conv2d_weight_grad(x: &Tensor, g: &Tensor, geom: &ConvGeom) -> Result<Tensor> {
    let [n, c, h, wd] = dims4(x, "conv2d input")?;
    let [gn, o, oh, ow] = dims4(g, "conv2d output gradient")?;
    if gn != n || h != geom.in_h || wd != geom.in_w || oh != geom.out_h || ow != geom.out_w {
        return Err(mismatch("conv2d_weight_grad", x, g));
    }
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let s = oh * ow;
    let ckk = c * kh * kw;
    let p = n * s;
    let cols = im2col(x.data(), n, c, geom);
    let gm = swap_leading(g.data(), n, o, s, false);
    let gw = gemm(o, p, ckk, &gm, (p, 1), &cols, (1, p));
    Ok(Tensor::from_parts(vec![o, c, kh, kw], gw))
}
