//! Dense row-major tensors and broadcasting helpers.

use std::fmt;

use super::error::{Result, TensorError};
use crate::Real;

/// Dense row-major tensor.
///
/// The product of `shape` always equals `data.len()`; a rank-0 tensor holds a
/// single scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::BadBuffer {
                shape,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows x cols` matrix from row slices.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = numel(shape);
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Element `(i, j)` of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Index of the first NaN or infinite entry.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn is_finite(&self) -> bool {
        self.first_non_finite().is_none()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn sum(&self) -> T {
        crate::scalar::pairwise_sum(&self.data)
    }

    /// Converts every element to another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Broadcast result shape of two operands (right-aligned, numpy rules).
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 && out[i + offset] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Walks every index of `out` yielding the flat offsets into the two operands.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..n {
        f(flat, oa, ob);
        // odometer increment
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * idx[d];
            ob -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Elementwise binary map with broadcasting.
pub fn zip_broadcast<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out = broadcast_shape(op, &a.shape, &b.shape)?;
    // row-vector against matrix is the hot path
    if out.len() == 2 && a.shape == out && b.len() == out[1] && b.shape.last() == Some(&out[1]) {
        let cols = out[1];
        let mut data = Vec::with_capacity(a.len());
        for row in a.data.chunks(cols) {
            data.extend(row.iter().zip(&b.data).map(|(&x, &y)| f(x, y)));
        }
        return Ok(Tensor { shape: out, data });
    }
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![T::zero(); numel(&out)];
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(a.data[ia], b.data[ib]));
    Ok(Tensor { shape: out, data })
}

/// Materializes `t` broadcast to `shape`.
pub fn broadcast_to<T: Real>(t: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let out = broadcast_shape("broadcast_to", &t.shape, shape)?;
    if out != shape {
        return Err(TensorError::ShapeMismatch {
            op: "broadcast_to",
            lhs: t.shape.clone(),
            rhs: shape.to_vec(),
        });
    }
    if t.shape == shape {
        return Ok(t.clone());
    }
    let st = broadcast_strides(&t.shape, &out);
    let zero = vec![0; out.len()];
    let mut data = vec![T::zero(); numel(&out)];
    for_each_broadcast(&out, &st, &zero, |o, i, _| data[o] = t.data[i]);
    Ok(Tensor { shape: out, data })
}

/// Sums `grad` (shaped like a broadcast output) back down to `shape`.
pub fn reduce_to_shape<T: Real>(grad: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape == shape {
        return grad;
    }
    let out = grad.shape.clone();
    let mut data = vec![T::zero(); numel(shape)];
    if out.len() == 2 && numel(shape) == out[1] && shape.last() == Some(&out[1]) {
        for row in grad.data.chunks(out[1]) {
            for (d, &g) in data.iter_mut().zip(row) {
                *d += g;
            }
        }
    } else {
        let st = broadcast_strides(shape, &out);
        let zero = vec![0; out.len()];
        for_each_broadcast(&out, &st, &zero, |o, i, _| data[i] += grad.data[o]);
    }
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Sum along `axis`, removing it from the shape.
pub fn sum_axis<T: Real>(t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= t.rank() {
        return Err(TensorError::InvalidAxis {
            op: "sum_axis",
            axis,
            rank: t.rank(),
        });
    }
    let outer: usize = t.shape[..axis].iter().product();
    let len = t.shape[axis];
    let inner: usize = t.shape[axis + 1..].iter().product();
    let mut data = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            for i in 0..inner {
                data[o * inner + i] += t.data[base + i];
            }
        }
    }
    let mut shape = t.shape.clone();
    shape.remove(axis);
    Ok(Tensor { shape, data })
}

/// Inverse of [`sum_axis`]: repeats `t` `len` times along a new `axis`.
pub fn expand_axis<T: Real>(t: &Tensor<T>, axis: usize, len: usize) -> Tensor<T> {
    let outer: usize = t.shape[..axis].iter().product();
    let inner: usize = t.shape[axis..].iter().product();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let chunk = &t.data[o * inner..(o + 1) * inner];
        for _ in 0..len {
            data.extend_from_slice(chunk);
        }
    }
    let mut shape = t.shape.clone();
    shape.insert(axis, len);
    Tensor { shape, data }
}

/// Plain matrix product of rank-2 tensors, optionally transposing operands.
pub fn matmul<T: Real>(
    a: &Tensor<T>,
    trans_a: bool,
    b: &Tensor<T>,
    trans_b: bool,
) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, ka) = if trans_a { (a.shape[1], a.shape[0]) } else { (a.shape[0], a.shape[1]) };
    let (kb, n) = if trans_b { (b.shape[1], b.shape[0]) } else { (b.shape[0], b.shape[1]) };
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut data = vec![T::zero(); m * n];
    T::gemm(m, ka, n, T::one(), &a.data, trans_a, &b.data, trans_b, T::zero(), &mut data);
    Ok(Tensor {
        shape: vec![m, n],
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = Tensor<f64>;

    #[test]
    fn sum_axis_rows() {
        let t = T64::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let s = sum_axis(&t, 1).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[3.0, 7.0]);
        let s0 = sum_axis(&t, 0).unwrap();
        assert_eq!(s0.data(), &[4.0, 6.0]);
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint() {
        let row = T64::vector(vec![1.0, 2.0, 3.0]);
        let big = broadcast_to(&row, &[2, 3]).unwrap();
        assert_eq!(big.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let back = reduce_to_shape(big, &[3]);
        assert_eq!(back.data(), &[2.0, 4.0, 6.0]);

        let col = T64::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let m = broadcast_to(&col, &[2, 3]).unwrap();
        assert_eq!(m.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(reduce_to_shape(m, &[2, 1]).data(), &[3.0, 6.0]);
    }

    #[test]
    fn incompatible_broadcast_names_both_shapes() {
        let a = T64::zeros(&[2, 3]);
        let b = T64::zeros(&[2, 2]);
        let err = zip_broadcast("add", &a, &b, |x, y| x + y).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                lhs: vec![2, 3],
                rhs: vec![2, 2]
            }
        );
    }

    #[test]
    fn scalar_broadcasts_everywhere() {
        let a = T64::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let s = T64::scalar(10.0);
        let c = zip_broadcast("add", &a, &s, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11.0, 12.0, 13.0, 14.0]);
        assert_eq!(reduce_to_shape(c, &[]).data(), &[50.0]);
    }

    #[test]
    fn expand_inverts_sum_shape() {
        let t = T64::vector(vec![1.0, 2.0]);
        let e = expand_axis(&t, 1, 3);
        assert_eq!(e.shape(), &[2, 3]);
        assert_eq!(e.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let e0 = expand_axis(&t, 0, 2);
        assert_eq!(e0.data(), &[1.0, 2.0, 1.0, 2.0]);
    }
}
