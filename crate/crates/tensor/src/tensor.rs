use std::fmt;
use std::sync::Arc;

use crate::error::{Result, TensorError};

/// Dense row-major array of `f64` values.
///
/// Storage is reference counted, so clones and reshapes are cheap and
/// tensors can be shared freely across threads. Every operation returns a
/// new tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        let head: Vec<f64> = self.data.iter().take(SHOWN).copied().collect();
        if self.data.len() > SHOWN {
            write!(f, " {head:?}..")
        } else {
            write!(f, " {head:?}")
        }
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(())
}

/// Row-major strides for `shape`.
pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (i, &d) in shape.iter().enumerate().rev() {
        strides[i] = acc;
        acc *= d;
    }
    strides
}

/// Strides that read a `src`-shaped buffer as if it were broadcast to `out`.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - src.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= src[i];
    }
    strides
}

/// Buffer offset of every element of `shape`, visited in row-major order,
/// under the given strides.
fn strided_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n = numel_of(shape);
    let mut out = Vec::with_capacity(n);
    if shape.is_empty() {
        out.push(0);
        return out;
    }
    let rank = shape.len();
    let last = rank - 1;
    let mut index = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        let step = strides[last];
        for k in 0..shape[last] {
            out.push(base + k * step);
        }
        // advance the odometer over all but the last axis
        let mut axis = last;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            index[axis] += 1;
            base += strides[axis];
            if index[axis] < shape[axis] {
                break;
            }
            base -= strides[axis] * shape[axis];
            index[axis] = 0;
        }
    }
}

/// Merge adjacent axes that both stride patterns traverse contiguously, and
/// drop unit axes, so broadcasting loops run over long innermost spans.
fn coalesce(shape: &[usize], sa: &[usize], sb: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (mut dims, mut oa, mut ob): (Vec<usize>, Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new(), Vec::new());
    for i in (0..shape.len()).rev() {
        if shape[i] == 1 {
            continue;
        }
        match (dims.last_mut(), oa.last(), ob.last()) {
            (Some(d), Some(&a), Some(&b)) if sa[i] == a * *d && sb[i] == b * *d => *d *= shape[i],
            _ => {
                dims.push(shape[i]);
                oa.push(sa[i]);
                ob.push(sb[i]);
            }
        }
    }
    if dims.is_empty() {
        return (vec![1], vec![0], vec![0]);
    }
    dims.reverse();
    oa.reverse();
    ob.reverse();
    (dims, oa, ob)
}

/// Broadcast result shape of two operands, aligned on trailing axes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_extents(&shape)?;
        let expected = numel_of(&shape);
        if expected != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("expected {expected} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor { shape, data: Arc::new(data) }
    }

    /// One-dimensional tensor.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(Vec::new(), vec![value])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        check_extents(shape)?;
        Ok(Tensor::from_parts(shape.to_vec(), vec![value; numel_of(shape)]))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Tensor::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::InvalidShape {
                shape: self.shape.clone(),
                reason: "item() needs exactly one element".into(),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        // v - v is NaN exactly for infinities and NaN, and the sum stays NaN
        self.data.iter().fold(0.0, |acc, &v| acc + (v - v)) == 0.0
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// ∞-norm of `self - other`.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_extents(shape)?;
        if numel_of(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise binary operation with broadcasting over size-1 axes.
    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Tensor::from_parts(self.shape.clone(), data));
        }
        if other.numel() == 1 && other.rank() <= self.rank() {
            let b = other.data[0];
            return Ok(Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&a| f(a, b)).collect()));
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| TensorError::ShapeMismatch {
            op,
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        })?;
        let (dims, sa, sb) = coalesce(&out_shape, &broadcast_strides(&self.shape, &out_shape), &broadcast_strides(&other.shape, &out_shape));
        let (a, b) = (&self.data, &other.data);
        let mut data = Vec::with_capacity(numel_of(&out_shape));
        let last = dims.len() - 1;
        let (run, ra, rb) = (dims[last], sa[last], sb[last]);
        let mut index = vec![0usize; last];
        let (mut ia, mut ib) = (0usize, 0usize);
        loop {
            match (ra, rb) {
                (1, 0) => data.extend(a[ia..ia + run].iter().map(|&x| f(x, b[ib]))),
                (0, 1) => data.extend(b[ib..ib + run].iter().map(|&y| f(a[ia], y))),
                _ => data.extend((0..run).map(|k| f(a[ia + k * ra], b[ib + k * rb]))),
            }
            let mut axis = last;
            loop {
                if axis == 0 {
                    return Ok(Tensor::from_parts(out_shape, data));
                }
                axis -= 1;
                index[axis] += 1;
                ia += sa[axis];
                ib += sb[axis];
                if index[axis] < dims[axis] {
                    break;
                }
                ia -= sa[axis] * dims[axis];
                ib -= sb[axis] * dims[axis];
                index[axis] = 0;
            }
        }
    }

    /// Sum-reduce over the axes along which `shape` would broadcast to `self.shape()`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape.as_slice() {
            return Ok(self.clone());
        }
        match broadcast_shape(shape, &self.shape) {
            Some(s) if s == self.shape => {}
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "sum_to",
                    lhs: self.shape.clone(),
                    rhs: shape.to_vec(),
                })
            }
        }
        check_extents(shape)?;
        let offsets = strided_offsets(&self.shape, &broadcast_strides(shape, &self.shape));
        let mut out = vec![0.0; numel_of(shape)];
        for (v, &o) in self.data.iter().zip(offsets.iter()) {
            out[o] += v;
        }
        Ok(Tensor::from_parts(shape.to_vec(), out))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape.as_slice() {
            return Ok(self.clone());
        }
        match broadcast_shape(&self.shape, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: self.shape.clone(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let offsets = strided_offsets(shape, &broadcast_strides(&self.shape, shape));
        Ok(Tensor::from_parts(shape.to_vec(), offsets.iter().map(|&o| self.data[o]).collect()))
    }

    /// Reorder axes: output axis `k` is input axis `axes[k]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("invalid permutation {axes:?}"),
            });
        }
        let strides = contiguous_strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let perm_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
        let offsets = strided_offsets(&out_shape, &perm_strides);
        Ok(Tensor::from_parts(out_shape, offsets.iter().map(|&o| self.data[o]).collect()))
    }

    /// Transpose of a matrix.
    pub fn t(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidShape {
                shape: self.shape.clone(),
                reason: "transpose needs a matrix".into(),
            });
        }
        self.permute(&[1, 0])
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidShape {
            shape: Vec::new(),
            reason: "concat of zero tensors".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::InvalidShape {
                shape: first.shape.clone(),
                reason: format!("concat axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for p in parts {
            let compatible = p.rank() == rank
                && p.shape.iter().zip(first.shape.iter()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total += p.shape[axis];
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut out_shape = first.shape.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(TensorError::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("slice axis {axis} [{start}, {}) out of range", start + len),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Zero padding; `pads[i]` is (before, after) for axis `i`.
    pub fn pad(&self, pads: &[(usize, usize)]) -> Result<Tensor> {
        if pads.len() != self.rank() {
            return Err(TensorError::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("pad needs {} axis pairs, got {}", self.rank(), pads.len()),
            });
        }
        let out_shape: Vec<usize> = self.shape.iter().zip(pads).map(|(d, (b, a))| d + b + a).collect();
        let out_strides = contiguous_strides(&out_shape);
        let base: usize = pads.iter().zip(out_strides.iter()).map(|((b, _), s)| b * s).sum();
        let offsets = strided_offsets(&self.shape, &out_strides);
        let mut out = vec![0.0; numel_of(&out_shape)];
        for (v, o) in self.data.iter().zip(offsets) {
            out[base + o] = *v;
        }
        Ok(Tensor::from_parts(out_shape, out))
    }
}
