//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every operation records its inputs and output on the tape during the
//! forward pass; `backward` replays the records in reverse and accumulates
//! adjoints. A tape can be differentiated once.

use crate::error::{Error, Result};
use crate::numgrad::tensor::Tensor;

/// Guard added to row norms before division in `L2NormalizeRows`.
pub const NORM_EPS: f64 = 1e-12;

/// The primitive operations the tape knows how to differentiate.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// 2-D matrix product.
    MatMul,
    /// Elementwise addition; also accepts `(m, n) + (n)` to broadcast a
    /// bias row over a matrix.
    Add,
    Sub,
    /// Elementwise (Hadamard) product.
    MulElem,
    /// Multiplication by a constant.
    ScalarMul(f64),
    Relu,
    Exp,
    /// Natural log; errors on non-positive input.
    Log,
    /// Sum of all elements, producing a scalar.
    Sum,
    /// Mean of all elements, producing a scalar.
    Mean,
    /// Normalize each row of a 2-D tensor to unit L2 norm.
    L2NormalizeRows,
    /// Stack 2-D tensors with equal column counts.
    ConcatRows,
    Transpose,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::MulElem => "mul",
            Op::ScalarMul(_) => "scalar_mul",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::L2NormalizeRows => "l2_normalize_rows",
            Op::ConcatRows => "concat_rows",
            Op::Transpose => "transpose",
        }
    }
}

/// Handle to a value on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    out: usize,
}

/// Recording of a forward computation.
pub struct Tape {
    vals: Vec<Tensor>,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            vals: Vec::new(),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Introduce an input value. Gradients can be requested for any leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.vals.push(t);
        Var {
            id: self.vals.len() - 1,
        }
    }

    /// Current value of a variable.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.id]
    }

    /// Record one primitive operation, running its forward pass eagerly.
    pub fn record(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let tensors: Vec<&Tensor> = inputs.iter().map(|v| &self.vals[v.id]).collect();
        let out = forward(&op, &tensors)?;
        if !out.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.vals.push(out);
        let out_id = self.vals.len() - 1;
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.id).collect(),
            out: out_id,
        });
        Ok(Var { id: out_id })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MulElem, &[a, b])
    }

    pub fn smul(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::ScalarMul(c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Log, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Mean, &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.record(Op::L2NormalizeRows, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::ConcatRows, parts)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose, &[a])
    }

    /// Elementwise absolute value, built from the primitive set as
    /// `relu(x) + relu(-x)`.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let pos = self.relu(a)?;
        let neg_in = self.smul(a, -1.0)?;
        let neg = self.relu(neg_in)?;
        self.add(pos, neg)
    }

    /// Reverse pass from a scalar loss. Consumes the tape: a second call
    /// returns `TapeConsumed`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let loss_val = &self.vals[loss.id];
        if !loss_val.is_scalar() {
            return Err(Error::NonScalarLoss {
                elements: loss_val.len(),
            });
        }

        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.vals.len()];
        adjoints[loss.id] = Some(vec![1.0]);

        for node in self.nodes.iter().rev() {
            let d_out = match adjoints[node.out].take() {
                Some(d) => d,
                None => continue,
            };
            let contribs = vjp(node, &self.vals, &d_out)?;
            for (input_id, contrib) in node.inputs.iter().zip(contribs) {
                match &mut adjoints[*input_id] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut interior = vec![false; self.vals.len()];
        for node in &self.nodes {
            interior[node.out] = true;
        }
        let shapes: Vec<Vec<usize>> = self.vals.iter().map(|t| t.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.vals.len());
        for (id, adj) in adjoints.into_iter().enumerate() {
            match adj {
                Some(data) if !interior[id] => {
                    grads.push(Some(Tensor::from_vec(shapes[id].clone(), data)?));
                }
                _ => grads.push(None),
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of a scalar loss with respect to tape leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.grads.get(v.id).and_then(Clone::clone) {
            Some(t) => t,
            None => Tensor::zeros(self.shapes[v.id].clone()),
        }
    }
}

fn want_arity(op: &Op, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::ShapeMismatch {
            op: op.name(),
            detail: format!("expected {} inputs, got {}", n, inputs.len()),
        });
    }
    Ok(())
}

fn want_2d(op: &Op, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::ShapeMismatch {
            op: op.name(),
            detail: format!("expected 2-D tensor, got shape {:?}", other),
        }),
    }
}

fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::MatMul => {
            want_arity(op, inputs, 2)?;
            let (m, ka) = want_2d(op, inputs[0])?;
            let (kb, n) = want_2d(op, inputs[1])?;
            if ka != kb {
                return Err(Error::ShapeMismatch {
                    op: op.name(),
                    detail: format!("inner dims {} vs {}", ka, kb),
                });
            }
            let data = mm(inputs[0].data(), inputs[1].data(), m, ka, n);
            Tensor::from_vec(vec![m, n], data)
        }
        Op::Add => {
            want_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Tensor::from_vec(a.shape().to_vec(), data)
            } else if a.shape().len() == 2 && b.shape() == [a.shape()[1]] {
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let mut data = Vec::with_capacity(m * n);
                for i in 0..m {
                    for (x, y) in a.row(i).iter().zip(b.data()) {
                        data.push(x + y);
                    }
                }
                Tensor::from_vec(vec![m, n], data)
            } else {
                Err(Error::ShapeMismatch {
                    op: op.name(),
                    detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
                })
            }
        }
        Op::Sub | Op::MulElem => {
            want_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: op.name(),
                    detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
                });
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| if matches!(op, Op::Sub) { x - y } else { x * y })
                .collect();
            Tensor::from_vec(a.shape().to_vec(), data)
        }
        Op::ScalarMul(c) => {
            want_arity(op, inputs, 1)?;
            if !c.is_finite() {
                return Err(Error::NonFinite { op: op.name() });
            }
            let data = inputs[0].data().iter().map(|x| c * x).collect();
            Tensor::from_vec(inputs[0].shape().to_vec(), data)
        }
        Op::Relu => {
            want_arity(op, inputs, 1)?;
            let data = inputs[0].data().iter().map(|x| x.max(0.0)).collect();
            Tensor::from_vec(inputs[0].shape().to_vec(), data)
        }
        Op::Exp => {
            want_arity(op, inputs, 1)?;
            let data = inputs[0].data().iter().map(|x| x.exp()).collect();
            Tensor::from_vec(inputs[0].shape().to_vec(), data)
        }
        Op::Log => {
            want_arity(op, inputs, 1)?;
            if inputs[0].data().iter().any(|&x| x <= 0.0) {
                return Err(Error::DomainError {
                    op: op.name(),
                    detail: "log of non-positive value".into(),
                });
            }
            let data = inputs[0].data().iter().map(|x| x.ln()).collect();
            Tensor::from_vec(inputs[0].shape().to_vec(), data)
        }
        Op::Sum => {
            want_arity(op, inputs, 1)?;
            Tensor::from_vec(vec![], vec![inputs[0].data().iter().sum()])
        }
        Op::Mean => {
            want_arity(op, inputs, 1)?;
            if inputs[0].is_empty() {
                return Err(Error::DomainError {
                    op: op.name(),
                    detail: "mean of empty tensor".into(),
                });
            }
            let n = inputs[0].len() as f64;
            let s: f64 = inputs[0].data().iter().sum();
            Tensor::from_vec(vec![], vec![s / n])
        }
        Op::L2NormalizeRows => {
            want_arity(op, inputs, 1)?;
            let (m, n) = want_2d(op, inputs[0])?;
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                let row = inputs[0].row(i);
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                let denom = norm + NORM_EPS;
                data.extend(row.iter().map(|x| x / denom));
            }
            Tensor::from_vec(vec![m, n], data)
        }
        Op::ConcatRows => {
            if inputs.is_empty() {
                return Err(Error::ShapeMismatch {
                    op: op.name(),
                    detail: "no inputs".into(),
                });
            }
            let (_, n0) = want_2d(op, inputs[0])?;
            let mut rows = 0;
            let mut data = Vec::new();
            for t in inputs {
                let (m, n) = want_2d(op, t)?;
                if n != n0 {
                    return Err(Error::ShapeMismatch {
                        op: op.name(),
                        detail: format!("column counts {} vs {}", n0, n),
                    });
                }
                rows += m;
                data.extend_from_slice(t.data());
            }
            Tensor::from_vec(vec![rows, n0], data)
        }
        Op::Transpose => {
            want_arity(op, inputs, 1)?;
            let (m, n) = want_2d(op, inputs[0])?;
            let src = inputs[0].data();
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    data[j * m + i] = src[i * n + j];
                }
            }
            Tensor::from_vec(vec![n, m], data)
        }
    }
}

fn vjp(node: &Node, vals: &[Tensor], d_out: &[f64]) -> Result<Vec<Vec<f64>>> {
    let input = |k: usize| &vals[node.inputs[k]];
    let out = &vals[node.out];
    let grads = match &node.op {
        Op::MatMul => {
            let (a, b) = (input(0), input(1));
            let (m, k) = (a.rows(), a.cols());
            let n = b.cols();
            let d_a = mm_nt(d_out, b.data(), m, n, k);
            let d_b = mm_tn(a.data(), d_out, m, k, n);
            vec![d_a, d_b]
        }
        Op::Add => {
            let (a, b) = (input(0), input(1));
            if a.shape() == b.shape() {
                vec![d_out.to_vec(), d_out.to_vec()]
            } else {
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let mut d_b = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        d_b[j] += d_out[i * n + j];
                    }
                }
                vec![d_out.to_vec(), d_b]
            }
        }
        Op::Sub => vec![d_out.to_vec(), d_out.iter().map(|d| -d).collect()],
        Op::MulElem => {
            let (a, b) = (input(0), input(1));
            let d_a = d_out.iter().zip(b.data()).map(|(d, y)| d * y).collect();
            let d_b = d_out.iter().zip(a.data()).map(|(d, x)| d * x).collect();
            vec![d_a, d_b]
        }
        Op::ScalarMul(c) => vec![d_out.iter().map(|d| c * d).collect()],
        // relu'(0) taken as 0
        Op::Relu => {
            let x = input(0);
            vec![d_out
                .iter()
                .zip(x.data())
                .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                .collect()]
        }
        Op::Exp => vec![d_out.iter().zip(out.data()).map(|(d, y)| d * y).collect()],
        Op::Log => {
            let x = input(0);
            vec![d_out.iter().zip(x.data()).map(|(d, v)| d / v).collect()]
        }
        Op::Sum => vec![vec![d_out[0]; input(0).len()]],
        Op::Mean => {
            let n = input(0).len() as f64;
            vec![vec![d_out[0] / n; input(0).len()]]
        }
        Op::L2NormalizeRows => {
            let x = input(0);
            let (m, n) = (x.rows(), x.cols());
            let mut d_x = vec![0.0; m * n];
            for i in 0..m {
                let row = x.row(i);
                let d_row = &d_out[i * n..(i + 1) * n];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let denom = norm + NORM_EPS;
                let dot: f64 = d_row.iter().zip(row).map(|(d, v)| d * v).sum();
                for j in 0..n {
                    let mut g = d_row[j] / denom;
                    if norm > 0.0 {
                        g -= row[j] * dot / (denom * denom * norm);
                    }
                    d_x[i * n + j] = g;
                }
            }
            vec![d_x]
        }
        Op::ConcatRows => {
            let mut grads = Vec::with_capacity(node.inputs.len());
            let mut offset = 0;
            for &id in &node.inputs {
                let len = vals[id].len();
                grads.push(d_out[offset..offset + len].to_vec());
                offset += len;
            }
            grads
        }
        Op::Transpose => {
            let (m, n) = (input(0).rows(), input(0).cols());
            let mut d_x = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    d_x[i * n + j] = d_out[j * m + i];
                }
            }
            vec![d_x]
        }
    };
    Ok(grads)
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `d @ b^T` where `d` is `(m, n)` and `b` is `(k, n)`.
fn mm_nt(d: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let d_row = &d[i * n..(i + 1) * n];
        for l in 0..k {
            let b_row = &b[l * n..(l + 1) * n];
            out[i * k + l] = d_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T @ d` where `a` is `(m, k)` and `d` is `(m, n)`.
fn mm_tn(a: &[f64], d: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let d_row = &d[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[l * n..(l + 1) * n];
            for (o, &dv) in o_row.iter_mut().zip(d_row) {
                *o += av * dv;
            }
        }
    }
    out
}
