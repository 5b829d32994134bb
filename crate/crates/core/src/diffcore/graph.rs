//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in construction order, so the node vector is
//! already a topological order: an op can only reference earlier ids.
//! `backward` replays the tape in reverse, accumulating one gradient
//! slot per node (same shape as the node value).

use super::{Array, DiffError};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Affine,
    Tanh,
    Sum,
    Mean,
    SquaredError,
    LogSumExp,
    Sigmoid,
    LogSigmoid,
    Concat,
    ConcatCols,
    Scale(f64),
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Array,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`NodeId`].
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to the given node, if
    /// the node is differentiable and reachable from the root.
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }
}

/// A single-owner forward tape over [`Array`] values.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    /// Insert a leaf. Only leaves with `requires_grad` (and nodes built
    /// from them) receive gradient slots.
    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, vec![], value, requires_grad)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, value: Array) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array::scalar(v))
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Array, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), DiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(DiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_op(
        &mut self,
        op: Op,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, DiffError> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Array::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(op, vec![a, b], value, rg))
    }

    fn map_op(
        &mut self,
        op: Op,
        a: NodeId,
        f: impl Fn(f64) -> f64,
    ) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let value = Array::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(op, vec![a], value, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip_op(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip_op(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip_op(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map_op(Op::Scale(c), a, |x| c * x)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map_op(Op::Tanh, a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map_op(Op::Sigmoid, a, sigmoid)
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map_op(Op::LogSigmoid, a, log_sigmoid)
    }

    /// Matrix product of a `[n, k]` and a `[k, m]` array.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let value = matmul(va, vb);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul, vec![a, b], value, rg))
    }

    /// Affine layer `x @ w + b` with `x: [n, k]`, `w: [k, m]`, `b: [m]`.
    /// The bias broadcasts over rows; this is the only broadcast the
    /// tape supports.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.shape().len() != 2 || vw.shape().len() != 2 || vx.shape()[1] != vw.shape()[0] {
            return Err(DiffError::ShapeMismatch {
                op: "affine",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        if vb.shape() != [vw.shape()[1]] {
            return Err(DiffError::ShapeMismatch {
                op: "affine bias",
                lhs: vw.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let value = affine(vx, vw, vb);
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(Op::Affine, vec![x, w, b], value, rg))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Op::Sum, vec![a], Array::scalar(total), rg)
    }

    /// Mean of all elements.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Op::Mean, vec![a], Array::scalar(m), rg)
    }

    /// Sum of squared differences, reduced to a scalar.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape("squared_error", a, b)?;
        let total: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::SquaredError, vec![a, b], Array::scalar(total), rg))
    }

    /// `log(sum(exp(x)))` over all elements, in shifted stable form.
    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let m = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = v.data().iter().map(|&x| (x - m).exp()).sum();
        let rg = self.any_grad(&[a]);
        self.push(Op::LogSumExp, vec![a], Array::scalar(m + s.ln()), rg)
    }

    /// Concatenate 1-D arrays (scalars included) into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::EmptyInput("concat"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 1 {
                return Err(DiffError::InvalidShape {
                    op: "concat",
                    shape: v.shape().to_vec(),
                    reason: "expects 1-D inputs",
                });
            }
            data.extend_from_slice(v.data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Op::Concat, parts.to_vec(), Array::vector(data), rg))
    }

    /// Concatenate 2-D arrays with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::EmptyInput("concat_cols"));
        }
        let rows = {
            let first = self.value(parts[0]);
            if first.shape().len() != 2 {
                return Err(DiffError::InvalidShape {
                    op: "concat_cols",
                    shape: first.shape().to_vec(),
                    reason: "expects 2-D inputs",
                });
            }
            first.shape()[0]
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.shape()[0] != rows {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(v.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Op::ConcatCols,
            parts.to_vec(),
            Array::new(vec![rows, total], data).expect("sized above"),
            rg,
        ))
    }

    /// Reverse accumulation from a scalar root. Returns one gradient per
    /// differentiable node reachable from the root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, DiffError> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(DiffError::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut slots: Vec<Option<Array>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            slots[root.0] = Some(Array::scalar(1.0));
        }
        for idx in (0..=root.0).rev() {
            // Nodes only reference earlier ids, so once idx is reached no
            // further accumulation into slots[idx] can happen.
            let Some(grad) = slots[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {}
                Op::Add => {
                    self.accumulate(&mut slots, node.inputs[0], grad.clone());
                    self.accumulate(&mut slots, node.inputs[1], grad.clone());
                }
                Op::Sub => {
                    self.accumulate(&mut slots, node.inputs[0], grad.clone());
                    self.accumulate(&mut slots, node.inputs[1], scale(&grad, -1.0));
                }
                Op::Mul => {
                    let a = self.value(node.inputs[0]);
                    let b = self.value(node.inputs[1]);
                    self.accumulate(&mut slots, node.inputs[0], hadamard(&grad, b));
                    self.accumulate(&mut slots, node.inputs[1], hadamard(&grad, a));
                }
                Op::Scale(c) => {
                    self.accumulate(&mut slots, node.inputs[0], scale(&grad, c));
                }
                Op::Tanh => {
                    let y = &node.value;
                    let g = zip(&grad, y, |g, y| g * (1.0 - y * y));
                    self.accumulate(&mut slots, node.inputs[0], g);
                }
                Op::Sigmoid => {
                    let y = &node.value;
                    let g = zip(&grad, y, |g, y| g * y * (1.0 - y));
                    self.accumulate(&mut slots, node.inputs[0], g);
                }
                Op::LogSigmoid => {
                    // d/dx log sigmoid(x) = 1 - sigmoid(x) = 1 - exp(y)
                    let y = &node.value;
                    let g = zip(&grad, y, |g, y| g * (1.0 - y.exp()));
                    self.accumulate(&mut slots, node.inputs[0], g);
                }
                Op::MatMul => {
                    let a = self.value(node.inputs[0]);
                    let b = self.value(node.inputs[1]);
                    self.accumulate(&mut slots, node.inputs[0], matmul_nt(&grad, b));
                    self.accumulate(&mut slots, node.inputs[1], matmul_tn(a, &grad));
                }
                Op::Affine => {
                    let x = self.value(node.inputs[0]);
                    let w = self.value(node.inputs[1]);
                    self.accumulate(&mut slots, node.inputs[0], matmul_nt(&grad, w));
                    self.accumulate(&mut slots, node.inputs[1], matmul_tn(x, &grad));
                    self.accumulate(&mut slots, node.inputs[2], col_sums(&grad));
                }
                Op::Sum => {
                    let g = grad.item();
                    let shape = self.value(node.inputs[0]).shape().to_vec();
                    let n: usize = shape.iter().product();
                    let arr = Array::new(shape, vec![g; n]).expect("sized");
                    self.accumulate(&mut slots, node.inputs[0], arr);
                }
                Op::Mean => {
                    let shape = self.value(node.inputs[0]).shape().to_vec();
                    let n: usize = shape.iter().product();
                    let g = grad.item() / n as f64;
                    let arr = Array::new(shape, vec![g; n]).expect("sized");
                    self.accumulate(&mut slots, node.inputs[0], arr);
                }
                Op::SquaredError => {
                    let a = self.value(node.inputs[0]);
                    let b = self.value(node.inputs[1]);
                    let g = grad.item();
                    let ga = zip(a, b, |x, y| 2.0 * g * (x - y));
                    let gb = zip(a, b, |x, y| -2.0 * g * (x - y));
                    self.accumulate(&mut slots, node.inputs[0], ga);
                    self.accumulate(&mut slots, node.inputs[1], gb);
                }
                Op::LogSumExp => {
                    // gradient is softmax(x): exp(x - lse)
                    let x = self.value(node.inputs[0]);
                    let lse = node.value.item();
                    let g = grad.item();
                    let data = x.data().iter().map(|&v| g * (v - lse).exp()).collect();
                    let arr = Array::new(x.shape().to_vec(), data).expect("same shape");
                    self.accumulate(&mut slots, node.inputs[0], arr);
                }
                Op::Concat => {
                    let mut offset = 0;
                    for &p in &node.inputs {
                        let n = self.value(p).numel();
                        let piece = Array::vector(grad.data()[offset..offset + n].to_vec());
                        self.accumulate(&mut slots, p, piece);
                        offset += n;
                    }
                }
                Op::ConcatCols => {
                    let rows = node.value.shape()[0];
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in &node.inputs {
                        let w = self.value(p).shape()[1];
                        let mut data = vec![0.0; rows * w];
                        for r in 0..rows {
                            data[r * w..(r + 1) * w].copy_from_slice(
                                &grad.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        let piece = Array::new(vec![rows, w], data).expect("sized");
                        self.accumulate(&mut slots, p, piece);
                        offset += w;
                    }
                }
            }
            slots[idx] = Some(grad);
        }
        Ok(Gradients { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Array>], id: NodeId, g: Array) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut slots[id.0] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), g.shape());
                for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    // log sigmoid(x) = min(x, 0) - ln(1 + exp(-|x|))
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn zip(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.shape().to_vec(), data).expect("same shape")
}

fn hadamard(a: &Array, b: &Array) -> Array {
    zip(a, b, |x, y| x * y)
}

fn scale(a: &Array, c: f64) -> Array {
    let data = a.data().iter().map(|&x| c * x).collect();
    Array::new(a.shape().to_vec(), data).expect("same shape")
}

/// `a @ b` with the k-loop outside the column loop; every output element
/// accumulates over k in ascending order, matching a plain dot product.
fn matmul(a: &Array, b: &Array) -> Array {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    matmul_into(a.data(), b.data(), n, k, m, &mut out);
    Array::new(vec![n, m], out).expect("sized")
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn affine(x: &Array, w: &Array, b: &Array) -> Array {
    let (n, k, m) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        out[i * m..(i + 1) * m].copy_from_slice(b.data());
    }
    matmul_into(x.data(), w.data(), n, k, m, &mut out);
    Array::new(vec![n, m], out).expect("sized")
}

/// `a @ b^T` for `a: [n, m]`, `b: [k, m]` -> `[n, k]`.
fn matmul_nt(a: &Array, b: &Array) -> Array {
    let (n, m) = (a.shape()[0], a.shape()[1]);
    let k = b.shape()[0];
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            let mut acc = 0.0;
            for p in 0..m {
                acc += a.data()[i * m + p] * b.data()[j * m + p];
            }
            out[i * k + j] = acc;
        }
    }
    Array::new(vec![n, k], out).expect("sized")
}

/// `a^T @ b` for `a: [n, k]`, `b: [n, m]` -> `[k, m]`.
fn matmul_tn(a: &Array, b: &Array) -> Array {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        for p in 0..k {
            let aip = a.data()[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let row = &mut out[p * m..(p + 1) * m];
            let brow = &b.data()[i * m..(i + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Array::new(vec![k, m], out).expect("sized")
}

fn col_sums(g: &Array) -> Array {
    let (n, m) = (g.shape()[0], g.shape()[1]);
    let mut out = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            out[j] += g.data()[i * m + j];
        }
    }
    Array::vector(out)
}
