//! Reverse-mode gradient tape.
//!
//! A [`Tape`] is created per differentiation scope. Leaves registered through
//! [`Tape::leaf`] are the trainable inputs; every op touching a taped tensor
//! appends a node whose inputs already exist, so the node list is topologically
//! ordered by construction and backward is a single reverse sweep.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::broadcast::{numel, reduce_to, split_axis};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) type Buf = Arc<Vec<f64>>;

pub(crate) struct TapeInner {
    id: u64,
    nodes: Mutex<Vec<Node>>,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: Arc<TapeInner>,
    pub(crate) id: usize,
}

impl NodeRef {
    pub(crate) fn tape_id(&self) -> u64 {
        self.tape.id
    }
}

pub(crate) struct Node {
    op: Op,
    inputs: Vec<Option<usize>>,
    shape: Vec<usize>,
}

pub(crate) enum Op {
    Leaf,
    Add { a: Vec<usize>, b: Vec<usize> },
    Sub { a: Vec<usize>, b: Vec<usize> },
    Mul { a: (Buf, Vec<usize>), b: (Buf, Vec<usize>) },
    Div { a: (Buf, Vec<usize>), b: (Buf, Vec<usize>) },
    Select { mask: Buf, a: Vec<usize>, b: Vec<usize> },
    Neg,
    Exp { out: Buf },
    Log { x: Buf },
    Sqrt { out: Buf },
    Tanh { out: Buf },
    Sigmoid { out: Buf },
    Softplus { x: Buf },
    Relu { x: Buf },
    Abs { x: Buf },
    Clamp { x: Buf, lo: f64, hi: f64 },
    MatMul { a: Buf, b: Buf, batch: usize, m: usize, k: usize, n: usize, b_batched: bool },
    SumAll { len: usize },
    SumAxis { in_shape: Vec<usize>, axis: usize },
    MaxAxis { in_shape: Vec<usize>, axis: usize, argmax: Vec<usize> },
    Softmax { out: Buf, n: usize },
    LogSoftmax { out: Buf, n: usize },
    LogSumExp { probs: Buf, n: usize },
    Reshape,
    BroadcastTo { in_shape: Vec<usize> },
    Concat { axis: usize, shapes: Vec<Vec<usize>> },
    Gather { in_shape: Vec<usize>, axis: usize, idx: Vec<usize>, per_outer: usize },
    Narrow { in_shape: Vec<usize>, axis: usize, start: usize },
}

/// An explicit, scoped gradient tape.
#[derive(Clone)]
pub struct Tape {
    inner: Arc<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.inner.id)
            .field("nodes", &self.len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Arc::new(TapeInner {
                id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
                nodes: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.nodes.lock().expect("tape poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a trainable leaf holding a copy of `value`'s data.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        let id = self.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: value.shape().to_vec(),
        });
        Tensor::with_node(
            value.shape().to_vec(),
            value.buffer(),
            Some(NodeRef {
                tape: self.inner.clone(),
                id,
            }),
        )
    }

    fn push(&self, node: Node) -> usize {
        push_node(&self.inner, node)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = match loss.node_ref() {
            Some(node) if node.tape_id() == self.inner.id => node.id,
            Some(_) => return Err(Error::Tape("loss was recorded on a different tape".into())),
            None => return Err(Error::Tape("loss is not recorded on this tape".into())),
        };
        let nodes = self.inner.nodes.lock().expect("tape poisoned");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                leaves.insert(id, g);
                continue;
            }
            let input_grads = node_backward(node, &g);
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                let (Some(input), Some(ig)) = (slot, ig) else { continue };
                match &mut grads[*input] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    empty => *empty = Some(ig),
                }
            }
        }
        Ok(Gradients {
            tape_id: self.inner.id,
            leaves,
        })
    }
}

pub(crate) fn push_node(tape: &Arc<TapeInner>, node: Node) -> usize {
    let mut nodes = tape.nodes.lock().expect("tape poisoned");
    nodes.push(node);
    nodes.len() - 1
}

/// Records `op` on the tape shared by the taped members of `inputs`.
pub(crate) fn record(
    inputs: &[&Tensor],
    op: impl FnOnce() -> Op,
    shape: Vec<usize>,
    data: impl Into<Buf>,
) -> Result<Tensor> {
    let mut tape: Option<&Arc<TapeInner>> = None;
    for t in inputs {
        if let Some(node) = t.node_ref() {
            match tape {
                None => tape = Some(&node.tape),
                Some(existing) if existing.id != node.tape.id => {
                    return Err(Error::Tape("operands recorded on different tapes".into()))
                }
                _ => {}
            }
        }
    }
    let node = match tape {
        None => None,
        Some(tape) => {
            let id = push_node(
                tape,
                Node {
                    op: op(),
                    inputs: inputs.iter().map(|t| t.node_ref().map(|n| n.id)).collect(),
                    shape: shape.clone(),
                },
            );
            Some(NodeRef {
                tape: tape.clone(),
                id,
            })
        }
    };
    Ok(Tensor::with_node(shape, data.into(), node))
}

/// Gradients of a scalar loss with respect to the leaves of one tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape_id: u64,
    leaves: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient for a leaf created by [`Tape::leaf`]; zero if the loss does not
    /// depend on it.
    pub fn wrt(&self, leaf: &Tensor) -> Result<Tensor> {
        let node = leaf
            .node_ref()
            .ok_or_else(|| Error::Tape("gradient requested for an untaped tensor".into()))?;
        if node.tape_id() != self.tape_id {
            return Err(Error::Tape("tensor belongs to a different tape".into()));
        }
        let data = match self.leaves.get(&node.id) {
            Some(g) => g.clone(),
            None => vec![0.0; leaf.numel()],
        };
        Tensor::from_vec(leaf.shape().to_vec(), data)
    }
}

fn node_backward(node: &Node, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let out_shape = &node.shape;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add { a, b } => vec![
            Some(reduce_to(g, out_shape, a)),
            Some(reduce_to(g, out_shape, b)),
        ],
        Op::Sub { a, b } => {
            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
            vec![
                Some(reduce_to(g, out_shape, a)),
                Some(reduce_to(&neg, out_shape, b)),
            ]
        }
        Op::Mul { a, b } => {
            use super::broadcast::binary_map;
            vec![
                node.inputs[0].map(|_| {
                    let ga = binary_map(g, out_shape, &b.0, &b.1, out_shape, |g, y| g * y);
                    reduce_to(&ga, out_shape, &a.1)
                }),
                node.inputs[1].map(|_| {
                    let gb = binary_map(g, out_shape, &a.0, &a.1, out_shape, |g, x| g * x);
                    reduce_to(&gb, out_shape, &b.1)
                }),
            ]
        }
        Op::Div { a, b } => {
            use super::broadcast::{binary_map, broadcast_strides, for_each_pair};
            let ga = binary_map(g, out_shape, &b.0, &b.1, out_shape, |g, y| g / y);
            let gb = node.inputs[1].map(|_| {
                // d(x/y)/dy = -x / y^2
                let sa = broadcast_strides(&a.1, out_shape);
                let sb = broadcast_strides(&b.1, out_shape);
                let mut full = vec![0.0; g.len()];
                for_each_pair(out_shape, &sa, &sb, |o, i, j| {
                    full[o] = -g[o] * a.0[i] / (b.0[j] * b.0[j]);
                });
                reduce_to(&full, out_shape, &b.1)
            });
            vec![node.inputs[0].map(|_| reduce_to(&ga, out_shape, &a.1)), gb]
        }
        Op::Select { mask, a, b } => {
            let ga: Vec<f64> = g.iter().zip(mask.iter()).map(|(g, m)| if *m != 0.0 { *g } else { 0.0 }).collect();
            let gb: Vec<f64> = g.iter().zip(mask.iter()).map(|(g, m)| if *m != 0.0 { 0.0 } else { *g }).collect();
            vec![
                Some(reduce_to(&ga, out_shape, a)),
                Some(reduce_to(&gb, out_shape, b)),
            ]
        }
        Op::Neg => vec![Some(g.iter().map(|x| -x).collect())],
        Op::Exp { out } => vec![Some(zip(g, out, |g, y| g * y))],
        Op::Log { x } => vec![Some(zip(g, x, |g, x| g / x))],
        Op::Sqrt { out } => vec![Some(zip(g, out, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 }))],
        Op::Tanh { out } => vec![Some(zip(g, out, |g, y| g * (1.0 - y * y)))],
        Op::Sigmoid { out } => vec![Some(zip(g, out, |g, y| g * y * (1.0 - y)))],
        Op::Softplus { x } => vec![Some(zip(g, x, |g, x| g * sigmoid(x)))],
        Op::Relu { x } => vec![Some(zip(g, x, |g, x| if x > 0.0 { g } else { 0.0 }))],
        Op::Abs { x } => vec![Some(zip(g, x, |g, x| g * x.signum() * (x != 0.0) as u8 as f64))],
        Op::Clamp { x, lo, hi } => {
            vec![Some(zip(g, x, |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }))]
        }
        Op::MatMul { a, b, batch, m, k, n, b_batched } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let ga = node.inputs[0].map(|_| {
                let mut ga = vec![0.0; batch * m * k];
                for p in 0..batch {
                    let bo = if *b_batched { p * k * n } else { 0 };
                    for i in 0..m {
                        let grow = &g[p * m * n + i * n..p * m * n + (i + 1) * n];
                        for kk in 0..k {
                            let brow = &b[bo + kk * n..bo + (kk + 1) * n];
                            ga[p * m * k + i * k + kk] = dot(grow, brow);
                        }
                    }
                }
                ga
            });
            let gb = node.inputs[1].map(|_| {
                let mut gb = vec![0.0; if *b_batched { batch * k * n } else { k * n }];
                for p in 0..batch {
                    let bo = if *b_batched { p * k * n } else { 0 };
                    for i in 0..m {
                        let grow = &g[p * m * n + i * n..p * m * n + (i + 1) * n];
                        for kk in 0..k {
                            let av = a[p * m * k + i * k + kk];
                            let dst = &mut gb[bo + kk * n..bo + (kk + 1) * n];
                            dst.iter_mut().zip(grow).for_each(|(d, g)| *d += av * g);
                        }
                    }
                }
                gb
            });
            vec![ga, gb]
        }
        Op::SumAll { len } => vec![Some(vec![g[0]; *len])],
        Op::SumAxis { in_shape, axis } => {
            let (outer, len, inner) = split_axis(in_shape, *axis);
            let mut gi = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let dst = &mut gi[(o * len + l) * inner..(o * len + l + 1) * inner];
                    dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gi)]
        }
        Op::MaxAxis { in_shape, axis, argmax } => {
            let (outer, len, inner) = split_axis(in_shape, *axis);
            let mut gi = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let l = argmax[o * inner + i];
                    gi[(o * len + l) * inner + i] = g[o * inner + i];
                }
            }
            vec![Some(gi)]
        }
        Op::Softmax { out, n } => {
            let mut gi = vec![0.0; out.len()];
            for (r, (gr, yr)) in g.chunks(*n).zip(out.chunks(*n)).enumerate() {
                let s = dot(gr, yr);
                for j in 0..*n {
                    gi[r * n + j] = yr[j] * (gr[j] - s);
                }
            }
            vec![Some(gi)]
        }
        Op::LogSoftmax { out, n } => {
            let mut gi = vec![0.0; out.len()];
            for (r, (gr, yr)) in g.chunks(*n).zip(out.chunks(*n)).enumerate() {
                let s: f64 = gr.iter().sum();
                for j in 0..*n {
                    gi[r * n + j] = gr[j] - yr[j].exp() * s;
                }
            }
            vec![Some(gi)]
        }
        Op::LogSumExp { probs, n } => {
            let mut gi = vec![0.0; probs.len()];
            for (r, pr) in probs.chunks(*n).enumerate() {
                for j in 0..*n {
                    gi[r * n + j] = g[r] * pr[j];
                }
            }
            vec![Some(gi)]
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::BroadcastTo { in_shape } => vec![Some(reduce_to(g, out_shape, in_shape))],
        Op::Concat { axis, shapes } => {
            let outer = numel(&out_shape[..*axis]);
            let inner = numel(&out_shape[*axis + 1..]);
            let total = out_shape[*axis];
            let mut offset = 0;
            shapes
                .iter()
                .map(|s| {
                    let len = s[*axis];
                    let mut gi = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[start..start + len * inner]);
                    }
                    offset += len;
                    Some(gi)
                })
                .collect()
        }
        Op::Gather { in_shape, axis, idx, per_outer } => {
            let (outer, len, inner) = split_axis(in_shape, *axis);
            let mut gi = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for j in 0..*per_outer {
                    let src = (o * per_outer + j) * inner;
                    let dst = (o * len + idx[o * per_outer + j]) * inner;
                    for i in 0..inner {
                        gi[dst + i] += g[src + i];
                    }
                }
            }
            vec![Some(gi)]
        }
        Op::Narrow { in_shape, axis, start } => {
            let (outer, len, inner) = split_axis(in_shape, *axis);
            let width = out_shape[*axis];
            let mut gi = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let dst = (o * len + start) * inner;
                gi[dst..dst + width * inner]
                    .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
            }
            vec![Some(gi)]
        }
    }
}

fn zip(g: &[f64], saved: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(saved).map(|(&g, &s)| f(g, s)).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
