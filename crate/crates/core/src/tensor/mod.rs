//! Dense batched `f64` tensors with optional reverse-mode differentiation.
//!
//! Tensors are immutable; every op returns a new tensor. A tensor created by
//! [`Tape::leaf`], or computed from one, carries a handle to that tape and any
//! op involving it is recorded. Untaped tensors run the same kernels without
//! recording, so taped and untaped forward passes agree bit for bit.

mod broadcast;
mod ops;
mod tape;

use std::fmt;
use std::sync::Arc;

pub use tape::{Gradients, Tape};
pub(crate) use tape::sigmoid;

use crate::error::{Error, Result};
use broadcast::numel;
use tape::NodeRef;

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
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
        if let Some(node) = &self.node {
            s.field("tape", &node.tape_id());
        }
        s.finish()
    }
}

/// Value equality; tape membership is ignored.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Shape produced by broadcasting `a` against `b` (trailing-axis aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    broadcast::broadcast_shapes("broadcast", a, b)
}

impl Tensor {
    pub(crate) fn with_node(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data, node }
    }

    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::invalid(
                "from_vec",
                format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Tensor::with_node(shape, Arc::new(data), None))
    }

    /// A rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::with_node(vec![n], Arc::new(data), None)
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::with_node(vec![], Arc::new(vec![x]), None)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor::with_node(shape, Arc::new(vec![value; n]), None)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::with_node(vec![n, n], Arc::new(data), None)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(f).collect();
        Tensor::with_node(shape, Arc::new(data), None)
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
        self.data.to_vec()
    }

    pub(crate) fn buffer(&self) -> Arc<Vec<f64>> {
        self.data.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::invalid(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            )),
        }
    }

    /// Extent of the leading (population) axis; 1 for scalars.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn is_taped(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape_id(&self) -> Option<u64> {
        self.node.as_ref().map(|n| n.tape_id())
    }

    pub(crate) fn node_ref(&self) -> Option<&NodeRef> {
        self.node.as_ref()
    }

    /// Value-identical copy detached from any tape.
    pub fn detach(&self) -> Tensor {
        Tensor::with_node(self.shape.clone(), self.data.clone(), None)
    }

    /// Elementwise map that is never recorded.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::with_node(
            self.shape.clone(),
            Arc::new(self.data.iter().map(|&x| f(x)).collect()),
            None,
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Interprets every element as a non-negative integer index below `bound`.
    pub fn to_indices(&self, op: &'static str, bound: usize) -> Result<Vec<usize>> {
        self.data
            .iter()
            .map(|&x| {
                if x >= 0.0 && x.fract() == 0.0 && (x as usize) < bound {
                    Ok(x as usize)
                } else {
                    Err(Error::IndexOutOfRange { op, index: x, len: bound })
                }
            })
            .collect()
    }

    pub(crate) fn normalize_axis(&self, op: &'static str, axis: isize) -> Result<usize> {
        let rank = self.rank() as isize;
        let a = if axis < 0 { axis + rank } else { axis };
        if a < 0 || a >= rank {
            return Err(Error::invalid(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape),
            ));
        }
        Ok(a as usize)
    }

    /// Indices of the maximum along the last axis (lowest index on ties).
    pub fn argmax_last(&self) -> Result<Tensor> {
        let n = *self
            .shape
            .last()
            .ok_or_else(|| Error::invalid("argmax_last", "scalar input"))?;
        let data = self
            .data
            .chunks(n.max(1))
            .map(|row| {
                let mut best = 0;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = j;
                    }
                }
                best as f64
            })
            .collect();
        Tensor::from_vec(self.shape[..self.rank() - 1].to_vec(), data)
    }

    /// Indices of the `k` largest entries along the last axis, in descending
    /// order of value (lowest index first on ties).
    pub fn top_k_last(&self, k: usize) -> Result<Tensor> {
        let n = *self
            .shape
            .last()
            .ok_or_else(|| Error::invalid("top_k_last", "scalar input"))?;
        if k > n {
            return Err(Error::invalid("top_k_last", format!("k = {k} exceeds axis length {n}")));
        }
        let mut data = Vec::with_capacity(self.numel() / n.max(1) * k);
        let mut order: Vec<usize> = Vec::with_capacity(n);
        for row in self.data.chunks(n.max(1)) {
            order.clear();
            order.extend(0..n);
            let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
            if k < n {
                order.select_nth_unstable_by(k, cmp);
            }
            order[..k].sort_by(cmp);
            data.extend(order[..k].iter().map(|&i| i as f64));
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = k;
        Tensor::from_vec(shape, data)
    }

    /// One-hot encoding of integer indices along a new trailing axis of size `n`.
    pub fn one_hot(&self, n: usize) -> Result<Tensor> {
        let idx = self.to_indices("one_hot", n)?;
        let mut data = vec![0.0; idx.len() * n];
        for (r, i) in idx.into_iter().enumerate() {
            data[r * n + i] = 1.0;
        }
        let mut shape = self.shape.clone();
        shape.push(n);
        Tensor::from_vec(shape, data)
    }

    /// Elementwise closeness with combined absolute/relative tolerance.
    pub fn allclose(&self, other: &Tensor, tol: f64) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0))
    }
}

#[cfg(test)]
mod tests;
