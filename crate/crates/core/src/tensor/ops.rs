//! Differentiable tensor operations.

use super::broadcast::{binary_map, broadcast_shapes, broadcast_strides, for_each_pair, numel, split_axis};
use std::sync::Arc;

use super::tape::{record, sigmoid, Buf, Op};
use super::Tensor;
use crate::error::{Error, Result};

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let shape = broadcast_shapes("add", &self.shape, &other.shape)?;
        let data = binary_map(&self.data, &self.shape, &other.data, &other.shape, &shape, |a, b| a + b);
        record(
            &[self, other],
            || Op::Add { a: self.shape.clone(), b: other.shape.clone() },
            shape,
            data,
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let shape = broadcast_shapes("sub", &self.shape, &other.shape)?;
        let data = binary_map(&self.data, &self.shape, &other.data, &other.shape, &shape, |a, b| a - b);
        record(
            &[self, other],
            || Op::Sub { a: self.shape.clone(), b: other.shape.clone() },
            shape,
            data,
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let shape = broadcast_shapes("mul", &self.shape, &other.shape)?;
        let data = binary_map(&self.data, &self.shape, &other.data, &other.shape, &shape, |a, b| a * b);
        record(
            &[self, other],
            || Op::Mul {
                a: (self.data.clone(), self.shape.clone()),
                b: (other.data.clone(), other.shape.clone()),
            },
            shape,
            data,
        )
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let shape = broadcast_shapes("div", &self.shape, &other.shape)?;
        let data = binary_map(&self.data, &self.shape, &other.data, &other.shape, &shape, |a, b| a / b);
        record(
            &[self, other],
            || Op::Div {
                a: (self.data.clone(), self.shape.clone()),
                b: (other.data.clone(), other.shape.clone()),
            },
            shape,
            data,
        )
    }

    pub fn add_scalar(&self, x: f64) -> Tensor {
        self.add(&Tensor::scalar(x)).expect("scalar broadcast")
    }

    pub fn mul_scalar(&self, x: f64) -> Tensor {
        self.mul(&Tensor::scalar(x)).expect("scalar broadcast")
    }

    pub fn square(&self) -> Tensor {
        self.mul(self).expect("same shape")
    }

    /// `mask ? self : other` elementwise; `mask` is treated as a constant.
    pub fn select(mask: &Tensor, on_true: &Tensor, on_false: &Tensor) -> Result<Tensor> {
        let shape = broadcast_shapes("select", &on_true.shape, &on_false.shape)?;
        let shape = broadcast_shapes("select", &mask.shape, &shape)?;
        let m = mask.broadcast_data(&shape);
        let a = on_true.broadcast_data(&shape);
        let b = on_false.broadcast_data(&shape);
        let data: Vec<f64> = (0..m.len()).map(|i| if m[i] != 0.0 { a[i] } else { b[i] }).collect();
        record(
            &[on_true, on_false],
            || Op::Select {
                mask: Arc::new(m),
                a: on_true.shape.clone(),
                b: on_false.shape.clone(),
            },
            shape,
            data,
        )
    }

    fn broadcast_data(&self, shape: &[usize]) -> Vec<f64> {
        if self.shape == shape {
            return self.data.to_vec();
        }
        let s = broadcast_strides(&self.shape, shape);
        let zeros = vec![0; shape.len()];
        let mut out = vec![0.0; numel(shape)];
        for_each_pair(shape, &s, &zeros, |o, i, _| out[o] = self.data[i]);
        out
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: impl FnOnce(&Buf, &Buf) -> Op) -> Tensor {
        let out: Buf = Arc::new(self.data.iter().map(|&x| f(x)).collect());
        record(&[self], || op(&self.data, &out), self.shape.clone(), out.clone()).expect("single tape")
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, |_, _| Op::Neg)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, out| Op::Exp { out: out.clone() })
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x, _| Op::Log { x: x.clone() })
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, |_, out| Op::Sqrt { out: out.clone() })
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |_, out| Op::Tanh { out: out.clone() })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, |_, out| Op::Sigmoid { out: out.clone() })
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&self) -> Tensor {
        self.unary(softplus, |x, _| Op::Softplus { x: x.clone() })
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| Op::Relu { x: x.clone() })
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| Op::Abs { x: x.clone() })
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(|x| x.clamp(lo, hi), |x, _| Op::Clamp { x: x.clone(), lo, hi })
    }

    /// Matrix product over the last two axes.
    ///
    /// `self` is `[..., m, k]`; `other` is either `[k, n]` (shared across the
    /// leading axes of `self`) or `[..., k, n]` with identical leading axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() < 2 || other.rank() < 2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k) = (self.shape[self.rank() - 2], self.shape[self.rank() - 1]);
        let (k2, n) = (other.shape[other.rank() - 2], other.shape[other.rank() - 1]);
        let lead = &self.shape[..self.rank() - 2];
        let b_batched = other.rank() > 2;
        if k != k2 || (b_batched && other.shape[..other.rank() - 2] != *lead) {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let batch = numel(lead);
        let mut out = vec![0.0; batch * m * n];
        for p in 0..batch {
            let bo = if b_batched { p * k * n } else { 0 };
            for i in 0..m {
                let dst = &mut out[p * m * n + i * n..p * m * n + (i + 1) * n];
                for kk in 0..k {
                    let av = self.data[p * m * k + i * k + kk];
                    let brow = &other.data[bo + kk * n..bo + (kk + 1) * n];
                    dst.iter_mut().zip(brow).for_each(|(d, b)| *d += av * b);
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        record(
            &[self, other],
            || Op::MatMul {
                a: self.data.clone(),
                b: other.data.clone(),
                batch,
                m,
                k,
                n,
                b_batched,
            },
            shape,
            out,
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn reduce_sum(&self) -> Tensor {
        let s = self.data.iter().sum();
        let len = self.numel();
        record(&[self], || Op::SumAll { len }, vec![], vec![s]).expect("single tape")
    }

    pub fn reduce_mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.reduce_sum().mul_scalar(1.0 / n)
    }

    pub fn sum_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor> {
        let axis = self.normalize_axis("sum_axis", axis)?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &self.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        let shape = reduced_shape(&self.shape, axis, keepdim);
        record(
            &[self],
            || Op::SumAxis { in_shape: self.shape.clone(), axis },
            shape,
            out,
        )
    }

    pub fn mean_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor> {
        let a = self.normalize_axis("mean_axis", axis)?;
        let len = self.shape[a].max(1) as f64;
        Ok(self.sum_axis(axis, keepdim)?.mul_scalar(1.0 / len))
    }

    /// Maximum along `axis`; the gradient flows to the first maximal entry.
    pub fn max_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor> {
        let axis = self.normalize_axis("max_axis", axis)?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        if len == 0 {
            return Err(Error::invalid("max_axis", "empty axis"));
        }
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let x = self.data[(o * len + l) * inner + i];
                    if x > out[o * inner + i] {
                        out[o * inner + i] = x;
                        argmax[o * inner + i] = l;
                    }
                }
            }
        }
        let shape = reduced_shape(&self.shape, axis, keepdim);
        record(
            &[self],
            || Op::MaxAxis { in_shape: self.shape.clone(), axis, argmax },
            shape,
            out,
        )
    }

    /// Sum of squares along the last axis.
    pub fn squared_l2_norm(&self) -> Result<Tensor> {
        self.square().sum_axis(-1, false)
    }

    fn last_axis_len(&self, op: &'static str) -> Result<usize> {
        match self.shape.last() {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(Error::invalid(op, format!("needs a non-empty last axis, shape {:?}", self.shape))),
        }
    }

    pub fn softmax(&self) -> Result<Tensor> {
        let n = self.last_axis_len("softmax")?;
        let mut out = self.data.to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let out: Buf = Arc::new(out);
        record(&[self], || Op::Softmax { out: out.clone(), n }, self.shape.clone(), out.clone())
    }

    pub fn log_softmax(&self) -> Result<Tensor> {
        let n = self.last_axis_len("log_softmax")?;
        let mut out = self.data.to_vec();
        for row in out.chunks_mut(n) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let out: Buf = Arc::new(out);
        record(&[self], || Op::LogSoftmax { out: out.clone(), n }, self.shape.clone(), out.clone())
    }

    /// `ln Σ exp` along the last axis.
    pub fn logsumexp(&self) -> Result<Tensor> {
        let n = self.last_axis_len("logsumexp")?;
        let rows = self.numel() / n;
        let mut out = Vec::with_capacity(rows);
        let mut probs = Vec::with_capacity(if self.is_taped() { self.numel() } else { 0 });
        for row in self.data.chunks(n) {
            let lse = logsumexp(row);
            out.push(lse);
            if self.is_taped() {
                probs.extend(row.iter().map(|x| (x - lse).exp()));
            }
        }
        let shape = self.shape[..self.rank() - 1].to_vec();
        record(
            &[self],
            || Op::LogSumExp { probs: Arc::new(probs), n },
            shape,
            out,
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        record(&[self], || Op::Reshape, shape, self.data.clone())
    }

    /// Inserts a length-1 axis at `axis` (which may equal the rank).
    pub fn unsqueeze(&self, axis: usize) -> Result<Tensor> {
        if axis > self.rank() {
            return Err(Error::invalid("unsqueeze", format!("axis {axis} > rank {}", self.rank())));
        }
        let mut shape = self.shape.clone();
        shape.insert(axis, 1);
        self.reshape(shape)
    }

    pub fn squeeze(&self, axis: usize) -> Result<Tensor> {
        if self.shape.get(axis) != Some(&1) {
            return Err(Error::invalid("squeeze", format!("axis {axis} of {:?} is not 1", self.shape)));
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        self.reshape(shape)
    }

    pub fn broadcast_to(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let b = broadcast_shapes("broadcast_to", &self.shape, &shape)?;
        if b != shape {
            return Err(Error::shape("broadcast_to", &self.shape, &shape));
        }
        if self.shape == shape {
            return Ok(self.clone());
        }
        let data = self.broadcast_data(&shape);
        record(
            &[self],
            || Op::BroadcastTo { in_shape: self.shape.clone() },
            shape,
            data,
        )
    }

    pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for t in tensors {
            let same = t.rank() == first.rank()
                && t.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", &first.shape, &t.shape));
            }
            total += t.shape[axis];
        }
        let outer = numel(&first.shape[..axis]);
        let inner = numel(&first.shape[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in tensors {
                let w = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        record(
            tensors,
            || Op::Concat { axis, shapes: tensors.iter().map(|t| t.shape.clone()).collect() },
            shape,
            data,
        )
    }

    /// Stacks equal-shaped tensors along a new leading axis.
    pub fn stack(tensors: &[&Tensor]) -> Result<Tensor> {
        let expanded = tensors.iter().map(|t| t.unsqueeze(0)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = expanded.iter().collect();
        Tensor::concat(&refs, 0)
    }

    /// Integer-index select along `axis`, batched over the leading axes.
    ///
    /// `indices` has shape `self.shape[..axis] ++ tail`; the result has shape
    /// `self.shape[..axis] ++ tail ++ self.shape[axis + 1..]`. An empty `tail`
    /// picks one entry per leading position and drops the axis.
    pub fn gather(&self, axis: isize, indices: &Tensor) -> Result<Tensor> {
        let axis = self.normalize_axis("gather", axis)?;
        let prefix = &self.shape[..axis];
        if indices.rank() < prefix.len() || indices.shape[..prefix.len()] != *prefix {
            return Err(Error::shape("gather", &self.shape, &indices.shape));
        }
        let tail = &indices.shape[prefix.len()..];
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let idx = indices.to_indices("gather", len)?;
        let per_outer = numel(tail);
        let mut data = Vec::with_capacity(outer * per_outer * inner);
        for o in 0..outer {
            for j in 0..per_outer {
                let src = (o * len + idx[o * per_outer + j]) * inner;
                data.extend_from_slice(&self.data[src..src + inner]);
            }
        }
        let mut shape = prefix.to_vec();
        shape.extend_from_slice(tail);
        shape.extend_from_slice(&self.shape[axis + 1..]);
        record(
            &[self],
            || Op::Gather { in_shape: self.shape.clone(), axis, idx, per_outer },
            shape,
            data,
        )
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: isize, start: usize, len: usize) -> Result<Tensor> {
        let axis = self.normalize_axis("narrow", axis)?;
        if start + len > self.shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} exceeds axis length {}", start + len, self.shape[axis]),
            ));
        }
        let (outer, full, inner) = split_axis(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&self.data[s..s + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        record(
            &[self],
            || Op::Narrow { in_shape: self.shape.clone(), axis, start },
            shape,
            data,
        )
    }

    /// Inner product along the last axis with broadcasting over the rest.
    pub fn dot_last(&self, other: &Tensor) -> Result<Tensor> {
        self.mul(other)?.sum_axis(-1, false)
    }
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
