//! Dense row-major `f64` tensor.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{shape_err, Result};

/// Dense n-dimensional value with an optional gradient buffer.
///
/// Data is always stored contiguously in row-major order, so a reshape is a
/// relabelling of extents and never moves data. A zero-dimensional tensor
/// (shape `[]`) holds a single scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Copies `data` laid out as `shape` into the order given by `perm`
/// (output axis `i` is input axis `perm[i]`).
pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        // odometer increment over the output index
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    if perm.len() != rank {
        return Err(shape_err!("permutation {perm:?} has wrong rank for a rank-{rank} tensor"));
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(shape_err!("{perm:?} is not a permutation of 0..{rank}"));
        }
        seen[p] = true;
    }
    Ok(())
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err!("extents must be positive, got {shape:?}"));
        }
        if numel(shape) != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.contains(&0), "extents must be positive, got {shape:?}");
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)], grad: None, requires_grad: false }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value], grad: None, requires_grad: false }
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        t
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                assert!(i < n, "index {index:?} out of bounds for {:?}", self.shape);
                acc * n + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Relabels the extents. Never touches the data.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) || numel(shape) != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    /// Reorders axes and materializes the result (output axis `i` is input
    /// axis `perm[i]`). Gradients are not carried over.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_perm(perm, self.rank())?;
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        Ok(Self {
            data: permute_data(&self.data, &self.shape, perm),
            shape,
            grad: None,
            requires_grad: self.requires_grad,
        })
    }

    /// Gathers slices along `axis` in the order given by `indices`.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        if axis >= self.rank() {
            return Err(shape_err!("axis {axis} out of range for {:?}", self.shape));
        }
        let extent = self.shape[axis];
        if indices.is_empty() {
            return Err(shape_err!("index_select needs at least one index"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(shape_err!("index {bad} out of range for axis {axis} of {:?}", self.shape));
        }
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * extent + i) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Tensor::new(&shape, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect(), grad: None, requires_grad: false }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(shape_err!("cannot compare {:?} with {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(shape_err!(
                "gradient of {} elements does not fit tensor {:?}",
                delta.len(),
                self.shape
            ));
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, d) in g.iter_mut().zip(delta) {
            *a += d;
        }
        Ok(())
    }

    /// Drops the gradient buffer and the `requires_grad` flag.
    pub fn detached(&self) -> Self {
        Self { shape: self.shape.clone(), data: self.data.clone(), grad: None, requires_grad: false }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        } else {
            s.field("data", &format_args!("[{} values]", self.data.len()));
        }
        s.field("requires_grad", &self.requires_grad).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn reshape_keeps_data() {
        let t = Tensor::from_fn(&[2, 4, 12], |i| (i[0] * 48 + i[1] * 12 + i[2]) as f64);
        let r = t.reshape(&[2, 4, 3, 2, 2]).unwrap();
        assert_eq!(r.shape(), &[2, 4, 3, 2, 2]);
        assert_eq!(r.data(), t.data());
        let back = r.reshape(&[2, 4, 12]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn reshape_mismatch_names_both_shapes() {
        let t = Tensor::zeros(&[2, 3]);
        let err = t.reshape(&[4, 2]).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn identity_permute_is_bitwise_equal() {
        let t = Tensor::new(&[1, 1, 4], alloc::vec![0.1, -2.5, 3.0, 1e-300]).unwrap();
        assert_eq!(t.permute(&[0, 1, 2]).unwrap(), t);
    }

    #[test]
    fn token_to_subpatch_layout() {
        // (B,N,C) = (2,4,12) viewed as (BN,c,h,w) = (8,3,2,2): a pure reshape.
        let x = Tensor::from_fn(&[2, 4, 12], |i| (i[0] * 1000 + i[1] * 100 + i[2]) as f64);
        let y = x.reshape(&[8, 3, 2, 2]).unwrap();
        for b in 0..2 {
            for n in 0..4 {
                for c in 0..3 {
                    for i in 0..2 {
                        for j in 0..2 {
                            assert_eq!(y.get(&[b * 4 + n, c, i, j]), x.get(&[b, n, c * 4 + i * 2 + j]));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn permute_matches_index_oracle() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| (i[0] * 12 + i[1] * 4 + i[2]) as f64);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(y.get(&[c, a, b]), x.get(&[a, b, c]));
                }
            }
        }
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn index_select_gathers_rows() {
        let x = Tensor::from_fn(&[1, 3, 2], |i| (i[1] * 2 + i[2]) as f64);
        let y = x.index_select(1, &[2, 0, 1]).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0, 0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn rejects_zero_extent() {
        assert!(Tensor::new(&[0, 2], alloc::vec![]).is_err());
    }
}
