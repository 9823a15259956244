//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive applied to a [`Var`] appends a node to its [`Tape`].
//! Nodes only reference earlier nodes, so [`Tape::backward`] is a single
//! reverse sweep over the node list. Values a node needs for its backward
//! rule are kept behind `Rc` and shared with the caller, and nothing is
//! saved for nodes that no gradient can reach.
//!
//! ```
//! use learnopt::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = x.square();
//! let grads = tape.backward(&y).unwrap();
//! assert_eq!(grads.wrt(&x).unwrap().item(), 6.0);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, Rows, View};
use crate::tensor::Tensor;

/// ELU with `alpha = 1`.
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// The operations the tape can record.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    MatMul,
    /// `matrix (n x m) + row (m)`, the only broadcast supported.
    AddRow,
    Sum,
    Mean,
    Sigmoid,
    Tanh,
    Relu,
    Elu,
    Square,
    Scale(f64),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape(Vec<usize>),
    /// Mean over rows of `-sum(labels * log_softmax(logits))`; the labels
    /// input is treated as data and receives no gradient.
    SoftmaxCrossEntropy,
    /// Mean squared difference over all elements.
    Mse,
    /// Fused LSTM cell: inputs `x (n x i)`, `state (n x 2h)` holding
    /// `[h | c]`, `w ((i+h) x 4h)` and `b (4h)` with gates ordered
    /// input, forget, cell, output. Output is the new `[h | c]`.
    LstmCell,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::MatMul => "matmul",
            Primitive::AddRow => "add_row",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Elu => "elu",
            Primitive::Square => "square",
            Primitive::Scale(_) => "scale",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape(_) => "reshape",
            Primitive::SoftmaxCrossEntropy => "softmax_cross_entropy",
            Primitive::Mse => "mse",
            Primitive::LstmCell => "lstm_cell",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::MatMul
            | Primitive::AddRow
            | Primitive::SoftmaxCrossEntropy
            | Primitive::Mse => Some(2),
            Primitive::LstmCell => Some(4),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

enum Backward {
    Leaf,
    Add,
    Sub,
    Mul {
        lhs: Rc<Tensor>,
        rhs: Rc<Tensor>,
    },
    MatMul {
        lhs: Rc<Tensor>,
        rhs: Rc<Tensor>,
    },
    AddRow,
    Sum,
    Mean,
    Sigmoid(Rc<Tensor>),
    Tanh(Rc<Tensor>),
    Relu(Rc<Tensor>),
    Elu {
        input: Rc<Tensor>,
        output: Rc<Tensor>,
    },
    Square(Rc<Tensor>),
    Scale(f64),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
    },
    Reshape,
    SoftmaxCrossEntropy {
        probs: Vec<f64>,
        labels: Rc<Tensor>,
    },
    Mse {
        diff: Vec<f64>,
    },
    LstmCell(Box<LstmSaved>),
}

struct LstmSaved {
    input_dim: usize,
    hidden: usize,
    x: Rc<Tensor>,
    state: Rc<Tensor>,
    acts: Vec<f64>,
    tanh_c: Vec<f64>,
    w: Rc<Tensor>,
}

struct Node {
    inputs: Vec<usize>,
    shape: Vec<usize>,
    requires_grad: bool,
    param: bool,
    backward: Backward,
}

/// An append-only record of primitive operations.
///
/// A tape is a single-threaded context; build one per unroll (or per
/// gradient evaluation) and drop it to release every saved value.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    value: Rc<Tensor>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient [`Tape::backward`] reports.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(Rc::new(value), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(Rc::new(value), false)
    }

    pub fn constant_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Same value as `x`, but backward contributes nothing through it.
    pub fn stop_gradient<'t>(&'t self, x: &Var<'t>) -> Var<'t> {
        self.leaf(x.value.clone(), false)
    }

    fn leaf(&self, value: Rc<Tensor>, param: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            inputs: Vec::new(),
            shape: value.shape().to_vec(),
            requires_grad: param,
            param,
            backward: Backward::Leaf,
        });
        Var {
            tape: self,
            id,
            value,
        }
    }

    fn push(&self, inputs: &[&Var<'_>], value: Rc<Tensor>, backward: Backward) -> Var<'_> {
        let requires_grad = !matches!(backward, Backward::Leaf);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            inputs: inputs.iter().map(|v| v.id).collect(),
            shape: value.shape().to_vec(),
            requires_grad,
            param: false,
            backward,
        });
        Var {
            tape: self,
            id,
            value,
        }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records `op` applied to `inputs` and returns its result.
    pub fn apply<'t>(&'t self, op: &Primitive, inputs: &[&Var<'t>]) -> Result<Var<'t>> {
        if inputs.iter().any(|v| !std::ptr::eq(v.tape, self)) {
            return Err(Error::ForeignVar);
        }
        match op.arity() {
            Some(n) if n != inputs.len() => {
                return Err(Error::arg(
                    op.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ))
            }
            None if inputs.is_empty() => return Err(Error::arg(op.name(), "no inputs")),
            _ => {}
        }
        let live = inputs.iter().any(|v| self.requires_grad(v.id));
        let (value, backward) = forward(op, inputs, live)?;
        let backward = if live { backward } else { Backward::Leaf };
        Ok(self.push(inputs, value, backward))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: &Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::ForeignVar);
        }
        if !root.value.is_scalar() {
            return Err(Error::NonScalarRoot(root.value.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.backward, Backward::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let input_shapes: Vec<&[usize]> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].shape.as_slice())
                .collect();
            let wants: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].requires_grad)
                .collect();
            let input_grads = backward_rule(&node.backward, &g, &node.shape, &input_shapes, &wants);
            for ((&input, want), ig) in node.inputs.iter().zip(wants).zip(input_grads) {
                if let (true, Some(ig)) = (want, ig) {
                    accumulate(&mut grads[input], ig);
                }
            }
        }
        let mut out = Vec::new();
        for (id, node) in nodes.iter().enumerate().take(root.id + 1) {
            if node.param {
                let n = node.shape.iter().product();
                let data = grads[id].take().unwrap_or_else(|| vec![0.0; n]);
                out.push((id, Tensor::from_parts(node.shape.clone(), data)));
            }
        }
        // Parameters created after the root cannot influence it.
        for (id, node) in nodes.iter().enumerate().skip(root.id + 1) {
            if node.param {
                out.push((id, Tensor::zeros(&node.shape)));
            }
        }
        Ok(Gradients { grads: out })
    }

    pub fn concat<'t>(&'t self, parts: &[&Var<'t>], axis: usize) -> Result<Var<'t>> {
        self.apply(&Primitive::Concat { axis }, parts)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Gradients of a scalar root with respect to every parameter leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<(usize, Tensor)>,
}

impl Gradients {
    pub fn wrt(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads
            .iter()
            .find(|(id, _)| *id == var.id)
            .map(|(_, g)| g)
    }

    /// Gradients for `vars`, in order; zeros for any that are not parameters.
    pub fn collect(&self, vars: &[Var<'_>]) -> Vec<Tensor> {
        vars.iter()
            .map(|v| {
                self.wrt(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape()))
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter().map(|(_, g)| g)
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_rc(&self) -> Rc<Tensor> {
        self.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(&self, op: Primitive) -> Var<'t> {
        self.tape
            .apply(&op, &[self])
            .expect("unary primitives accept any shape")
    }

    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(&Primitive::Add, &[self, rhs])
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(&Primitive::Sub, &[self, rhs])
    }

    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(&Primitive::Mul, &[self, rhs])
    }

    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(&Primitive::MatMul, &[self, rhs])
    }

    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(&Primitive::AddRow, &[self, row])
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Primitive::Sum)
    }

    pub fn mean(&self) -> Var<'t> {
        self.unary(Primitive::Mean)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Primitive::Sigmoid)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Primitive::Tanh)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Primitive::Relu)
    }

    pub fn elu(&self) -> Var<'t> {
        self.unary(Primitive::Elu)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Primitive::Square)
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        self.unary(Primitive::Scale(k))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        self.tape
            .apply(&Primitive::Slice { axis, start, len }, &[self])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.apply(&Primitive::Reshape(shape.to_vec()), &[self])
    }

    pub fn softmax_cross_entropy(&self, labels: &Var<'t>) -> Result<Var<'t>> {
        self.tape
            .apply(&Primitive::SoftmaxCrossEntropy, &[self, labels])
    }

    pub fn mse(&self, target: &Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(&Primitive::Mse, &[self, target])
    }

    /// One LSTM step; `self` is the input batch, `state` is `[h | c]`.
    pub fn lstm_cell(&self, state: &Var<'t>, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(&Primitive::LstmCell, &[self, state, w, b])
    }

    pub fn stop_gradient(&self) -> Var<'t> {
        self.tape.stop_gradient(self)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| Error::arg(op, format!("expected a matrix, got shape {:?}", t.shape())))
}

/// `(outer, axis extent, inner)` view of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn forward(op: &Primitive, inputs: &[&Var<'_>], live: bool) -> Result<(Rc<Tensor>, Backward)> {
    let v = |i: usize| -> &Tensor { &inputs[i].value };
    let rc = |i: usize| -> Rc<Tensor> { inputs[i].value.clone() };
    let name = op.name();
    let (value, backward): (Tensor, Backward) = match op {
        Primitive::Add => {
            same_shape(name, v(0), v(1))?;
            (v(0).zip_map(v(1), |a, b| a + b)?, Backward::Add)
        }
        Primitive::Sub => {
            same_shape(name, v(0), v(1))?;
            (v(0).zip_map(v(1), |a, b| a - b)?, Backward::Sub)
        }
        Primitive::Mul => {
            same_shape(name, v(0), v(1))?;
            (
                v(0).zip_map(v(1), |a, b| a * b)?,
                Backward::Mul {
                    lhs: rc(0),
                    rhs: rc(1),
                },
            )
        }
        Primitive::MatMul => {
            let (n, k) = dims2(name, v(0))?;
            let (k2, m) = dims2(name, v(1))?;
            if k != k2 {
                return Err(Error::shape(name, v(0).shape(), v(1).shape()));
            }
            let mut out = vec![0.0; n * m];
            kernels::gemm(n, k, m, 1.0, v(0).data(), false, v(1).data(), false, 0.0, &mut out);
            (
                Tensor::from_parts(vec![n, m], out),
                Backward::MatMul {
                    lhs: rc(0),
                    rhs: rc(1),
                },
            )
        }
        Primitive::AddRow => {
            let (n, m) = dims2(name, v(0))?;
            if v(1).len() != m || v(1).ndim() != 1 {
                return Err(Error::shape(name, v(0).shape(), v(1).shape()));
            }
            let row = v(1).data();
            let mut out = v(0).data().to_vec();
            for r in 0..n {
                for (o, b) in out[r * m..(r + 1) * m].iter_mut().zip(row) {
                    *o += b;
                }
            }
            (Tensor::from_parts(vec![n, m], out), Backward::AddRow)
        }
        Primitive::Sum => (Tensor::scalar(v(0).sum()), Backward::Sum),
        Primitive::Mean => (
            Tensor::scalar(v(0).sum() / v(0).len() as f64),
            Backward::Mean,
        ),
        Primitive::Relu => (v(0).map(|x| x.max(0.0)), Backward::Relu(rc(0))),
        Primitive::Square => (v(0).map(|x| x * x), Backward::Square(rc(0))),
        Primitive::Scale(k) => {
            let k = *k;
            (v(0).map(|x| k * x), Backward::Scale(k))
        }
        Primitive::Concat { axis } => {
            let axis = *axis;
            let first = v(0).shape();
            if axis >= first.len() {
                return Err(Error::arg(name, format!("axis {axis} out of range for {first:?}")));
            }
            let mut total = 0;
            for input in inputs {
                let s = input.value.shape();
                let compatible = s.len() == first.len()
                    && s.iter()
                        .zip(first)
                        .enumerate()
                        .all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(Error::shape(name, first, s));
                }
                total += s[axis];
            }
            let mut shape = first.to_vec();
            shape[axis] = total;
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for input in inputs {
                    let (_, len, _) = split_axis(input.value.shape(), axis);
                    let chunk = len * inner;
                    out.extend_from_slice(&input.value.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            (Tensor::from_parts(shape, out), Backward::Concat { axis })
        }
        Primitive::Slice { axis, start, len } => {
            let (axis, start, len) = (*axis, *start, *len);
            let shape = v(0).shape();
            if axis >= shape.len() || len == 0 || start + len > shape[axis] {
                return Err(Error::arg(
                    name,
                    format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
                ));
            }
            let (outer, extent, inner) = split_axis(shape, axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * extent * inner + start * inner;
                out.extend_from_slice(&v(0).data()[base..base + len * inner]);
            }
            let mut new_shape = shape.to_vec();
            new_shape[axis] = len;
            (
                Tensor::from_parts(new_shape, out),
                Backward::Slice { axis, start },
            )
        }
        Primitive::Reshape(shape) => {
            let t = v(0).reshape(shape).map_err(|_| Error::shape(name, v(0).shape(), shape))?;
            (t, Backward::Reshape)
        }
        Primitive::SoftmaxCrossEntropy => {
            same_shape(name, v(0), v(1))?;
            let (b, c) = dims2(name, v(0))?;
            let logits = v(0).data();
            let labels = v(1).data();
            let mut probs = vec![0.0; b * c];
            let mut loss = 0.0;
            for r in 0..b {
                let row = &logits[r * c..(r + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (p, &x) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                    *p = (x - max).exp();
                    z += *p;
                }
                let log_z = z.ln() + max;
                for (j, p) in probs[r * c..(r + 1) * c].iter_mut().enumerate() {
                    *p /= z;
                    let y = labels[r * c + j];
                    if y != 0.0 {
                        loss -= y * (row[j] - log_z);
                    }
                }
            }
            (
                Tensor::scalar(loss / b as f64),
                Backward::SoftmaxCrossEntropy {
                    probs: if live { probs } else { Vec::new() },
                    labels: rc(1),
                },
            )
        }
        Primitive::Mse => {
            same_shape(name, v(0), v(1))?;
            let diff: Vec<f64> = v(0)
                .data()
                .iter()
                .zip(v(1).data())
                .map(|(p, t)| p - t)
                .collect();
            let loss = diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
            (Tensor::scalar(loss), Backward::Mse { diff })
        }
        Primitive::LstmCell => lstm_forward(inputs, live)?,
        Primitive::Sigmoid => {
            let mut out = vec![0.0; v(0).len()];
            kernels::sigmoid_slice(v(0).data(), &mut out);
            let out = Rc::new(Tensor::from_parts(v(0).shape().to_vec(), out));
            return Ok((out.clone(), Backward::Sigmoid(out)));
        }
        Primitive::Tanh => {
            let mut out = vec![0.0; v(0).len()];
            kernels::tanh_slice(v(0).data(), &mut out);
            let out = Rc::new(Tensor::from_parts(v(0).shape().to_vec(), out));
            return Ok((out.clone(), Backward::Tanh(out)));
        }
        Primitive::Elu => {
            let mut out = vec![0.0; v(0).len()];
            kernels::elu_slice(v(0).data(), &mut out);
            let out = Rc::new(Tensor::from_parts(v(0).shape().to_vec(), out));
            return Ok((
                out.clone(),
                Backward::Elu {
                    input: rc(0),
                    output: out,
                },
            ));
        }
    };
    Ok((Rc::new(value), backward))
}

/// Rows per block of the fused LSTM kernels; keeps the gate buffers in cache.
const LSTM_CHUNK: usize = 128;

fn lstm_forward(inputs: &[&Var<'_>], live: bool) -> Result<(Tensor, Backward)> {
    const NAME: &str = "lstm_cell";
    let (x, state, w, b) = (
        &inputs[0].value,
        &inputs[1].value,
        &inputs[2].value,
        &inputs[3].value,
    );
    let (n, input_dim) = dims2(NAME, x)?;
    let (n2, two_h) = dims2(NAME, state)?;
    if n2 != n || two_h % 2 != 0 {
        return Err(Error::shape(NAME, x.shape(), state.shape()));
    }
    let hidden = two_h / 2;
    let (w_rows, w_cols) = dims2(NAME, w)?;
    if w_rows != input_dim + hidden || w_cols != 4 * hidden {
        return Err(Error::shape(NAME, &[input_dim + hidden, 4 * hidden], w.shape()));
    }
    if b.shape() != [4 * hidden] {
        return Err(Error::shape(NAME, &[4 * hidden], b.shape()));
    }
    let g_cols = 4 * hidden;
    let (w_x, w_h) = w.data().split_at(input_dim * g_cols);
    let mut out = vec![0.0; n * two_h];
    let stored = if live { n } else { LSTM_CHUNK.min(n) };
    let mut acts = vec![0.0; stored * g_cols];
    let mut tanh_c = vec![0.0; stored * hidden];
    for r0 in (0..n).step_by(LSTM_CHUNK) {
        let rows = LSTM_CHUNK.min(n - r0);
        let base = if live { r0 } else { 0 };
        let a = &mut acts[base * g_cols..(base + rows) * g_cols];
        kernels::affine2(
            rows,
            b.data(),
            Rows { data: &x.data()[r0 * input_dim..], rs: input_dim, k: input_dim },
            w_x,
            Rows { data: &state.data()[r0 * two_h..], rs: two_h, k: hidden },
            w_h,
            a,
        );
        kernels::lstm_gates(
            hidden,
            a,
            &state.data()[r0 * two_h..(r0 + rows) * two_h],
            &mut out[r0 * two_h..(r0 + rows) * two_h],
            &mut tanh_c[base * hidden..(base + rows) * hidden],
        );
    }
    let backward = if live {
        Backward::LstmCell(Box::new(LstmSaved {
            input_dim,
            hidden,
            x: inputs[0].value.clone(),
            state: inputs[1].value.clone(),
            acts,
            tanh_c,
            w: inputs[2].value.clone(),
        }))
    } else {
        Backward::Leaf
    };
    Ok((Tensor::from_parts(vec![n, two_h], out), backward))
}

/// Input gradients of one node given the gradient `g` of its output.
/// Entries are `None` where the input needs no gradient.
fn backward_rule(
    rule: &Backward,
    g: &[f64],
    out_shape: &[usize],
    in_shapes: &[&[usize]],
    wants: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let numel = |s: &[usize]| s.iter().product::<usize>();
    let zip = |a: &[f64], b: &[f64], f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    };
    match rule {
        Backward::Leaf => vec![],
        Backward::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Backward::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|x| -x).collect())],
        Backward::Mul { lhs, rhs } => vec![
            wants[0].then(|| zip(g, rhs.data(), &|a, b| a * b)),
            wants[1].then(|| zip(g, lhs.data(), &|a, b| a * b)),
        ],
        Backward::MatMul { lhs, rhs } => {
            let (n, k) = (in_shapes[0][0], in_shapes[0][1]);
            let m = in_shapes[1][1];
            let da = wants[0].then(|| {
                let mut da = vec![0.0; n * k];
                kernels::gemm(n, m, k, 1.0, g, false, rhs.data(), true, 0.0, &mut da);
                da
            });
            let db = wants[1].then(|| {
                let mut db = vec![0.0; k * m];
                kernels::gemm(k, n, m, 1.0, lhs.data(), true, g, false, 0.0, &mut db);
                db
            });
            vec![da, db]
        }
        Backward::AddRow => {
            let m = in_shapes[1][0];
            let db = wants[1].then(|| {
                let mut db = vec![0.0; m];
                for row in g.chunks_exact(m) {
                    for (d, x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                db
            });
            vec![Some(g.to_vec()), db]
        }
        Backward::Sum => vec![Some(vec![g[0]; numel(in_shapes[0])])],
        Backward::Mean => {
            let n = numel(in_shapes[0]);
            vec![Some(vec![g[0] / n as f64; n])]
        }
        Backward::Sigmoid(y) => vec![Some(zip(g, y.data(), &|g, y| g * y * (1.0 - y)))],
        Backward::Tanh(y) => vec![Some(zip(g, y.data(), &|g, y| g * (1.0 - y * y)))],
        Backward::Relu(x) => vec![Some(zip(g, x.data(), &|g, x| if x > 0.0 { g } else { 0.0 }))],
        Backward::Elu { input, output } => vec![Some(
            g.iter()
                .zip(input.data().iter().zip(output.data()))
                .map(|(&g, (&x, &y))| if x > 0.0 { g } else { g * (y + 1.0) })
                .collect(),
        )],
        Backward::Square(x) => vec![Some(zip(g, x.data(), &|g, x| 2.0 * g * x))],
        Backward::Scale(k) => vec![Some(g.iter().map(|x| k * x).collect())],
        Backward::Concat { axis } => {
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            in_shapes
                .iter()
                .zip(wants)
                .map(|(s, &want)| {
                    let len = s[*axis];
                    let piece = want.then(|| {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        d
                    });
                    offset += len;
                    piece
                })
                .collect()
        }
        Backward::Slice { axis, start } => {
            let (outer, extent, inner) = split_axis(in_shapes[0], *axis);
            let len = out_shape[*axis];
            let mut d = vec![0.0; outer * extent * inner];
            for o in 0..outer {
                let base = o * extent * inner + start * inner;
                d[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(d)]
        }
        Backward::Reshape => vec![Some(g.to_vec())],
        Backward::SoftmaxCrossEntropy { probs, labels } => {
            let (b, c) = (in_shapes[0][0], in_shapes[0][1]);
            let scale = g[0] / b as f64;
            let y = labels.data();
            let mut d = vec![0.0; b * c];
            for r in 0..b {
                let mass: f64 = y[r * c..(r + 1) * c].iter().sum();
                for j in 0..c {
                    let i = r * c + j;
                    d[i] = scale * (probs[i] * mass - y[i]);
                }
            }
            vec![Some(d), None]
        }
        Backward::Mse { diff } => {
            let k = 2.0 * g[0] / diff.len() as f64;
            let dp: Vec<f64> = diff.iter().map(|d| k * d).collect();
            let dt = wants[1].then(|| dp.iter().map(|x| -x).collect());
            vec![Some(dp), dt]
        }
        Backward::LstmCell(saved) => lstm_backward(saved, g, wants),
    }
}

fn lstm_backward(s: &LstmSaved, g: &[f64], wants: &[bool]) -> Vec<Option<Vec<f64>>> {
    let (i_dim, h) = (s.input_dim, s.hidden);
    let (two_h, g_cols) = (2 * h, 4 * h);
    let n = s.tanh_c.len() / h;
    let (w_x, w_h) = s.w.data().split_at(i_dim * g_cols);
    let (x, state) = (s.x.data(), s.state.data());
    let mut d_pre = vec![0.0; LSTM_CHUNK.min(n) * g_cols];
    let mut d_x = wants[0].then(|| vec![0.0; n * i_dim]);
    let mut d_state = vec![0.0; n * two_h];
    let mut d_w = wants[2].then(|| vec![0.0; (i_dim + h) * g_cols]);
    let mut d_b = wants[3].then(|| vec![0.0; g_cols]);
    for r0 in (0..n).step_by(LSTM_CHUNK) {
        let rows = LSTM_CHUNK.min(n - r0);
        let d = &mut d_pre[..rows * g_cols];
        let ds = &mut d_state[r0 * two_h..(r0 + rows) * two_h];
        kernels::lstm_gates_backward(
            h,
            &s.acts[r0 * g_cols..(r0 + rows) * g_cols],
            &s.tanh_c[r0 * h..(r0 + rows) * h],
            &state[r0 * two_h..(r0 + rows) * two_h],
            &g[r0 * two_h..(r0 + rows) * two_h],
            d,
            ds,
        );
        let d_view = View::new(d, g_cols, 1);
        if let Some(dw) = d_w.as_mut() {
            let (dw_x, dw_h) = dw.split_at_mut(i_dim * g_cols);
            let xs = View::new(&x[r0 * i_dim..], 1, i_dim);
            kernels::gemm_view(i_dim, rows, g_cols, 1.0, xs, d_view, 1.0, dw_x, g_cols);
            let hs = View::new(&state[r0 * two_h..], 1, two_h);
            kernels::gemm_view(h, rows, g_cols, 1.0, hs, d_view, 1.0, dw_h, g_cols);
        }
        if let Some(db) = d_b.as_mut() {
            for row in d.chunks_exact(g_cols) {
                for (acc, v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if let Some(dx) = d_x.as_mut() {
            let out = &mut dx[r0 * i_dim..(r0 + rows) * i_dim];
            kernels::gemm_view(rows, g_cols, i_dim, 1.0, d_view, View::new(w_x, 1, g_cols), 0.0, out, i_dim);
        }
        if wants[1] {
            kernels::gemm_view(rows, g_cols, h, 1.0, d_view, View::new(w_h, 1, g_cols), 0.0, ds, two_h);
        }
    }
    vec![d_x, wants[1].then_some(d_state), d_w, d_b]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        assert_eq!(x.sigmoid().value().item(), 0.5);
    }

    #[test]
    fn matmul_by_identity() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = tape.constant(Tensor::eye(2));
        assert_eq!(a.matmul(&i).unwrap().value().data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn uniform_logits_give_ln_10() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 10]));
        let mut y = vec![0.0; 30];
        y[4] = 1.0;
        y[10] = 1.0;
        y[29] = 1.0;
        let labels = tape.constant(t(&[3, 10], &y));
        let loss = logits.softmax_cross_entropy(&labels).unwrap();
        assert!((loss.value().item() - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let g = tape.backward(&x.square()).unwrap();
        assert_eq!(g.wrt(&x).unwrap().item(), 6.0);
    }

    #[test]
    fn mse_at_target_has_zero_gradient() {
        let tape = Tape::new();
        let p = tape.param(t(&[3], &[1., -2., 0.5]));
        let target = tape.constant(t(&[3], &[1., -2., 0.5]));
        let g = tape.backward(&p.mse(&target).unwrap()).unwrap();
        assert!(g.wrt(&p).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(&x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn stop_gradient_severs_edge() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x.square().stop_gradient();
        assert_eq!(y.value().item(), 9.0);
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.wrt(&x).unwrap().item(), 0.0);

        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        assert_eq!(x.stop_gradient().value().item(), 3.0);
        let root = x.add(&x.stop_gradient()).unwrap().sum();
        assert_eq!(tape.backward(&root).unwrap().wrt(&x).unwrap().item(), 1.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        assert_eq!(tape.backward(&y).unwrap().wrt(&x).unwrap().item(), 5.0);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let g = tape.backward(&x.relu().sum()).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[5., 6.]));
        let c = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.value().data(), &[1., 2., 5., 3., 4., 6.]);
        let s = c.slice(1, 2, 1).unwrap();
        assert_eq!(s.value().data(), &[5., 6.]);
        let rows = tape.concat(&[&a, &a], 0).unwrap();
        assert_eq!(rows.shape(), &[4, 2]);
        assert!(c.slice(1, 2, 2).is_err());
    }

    #[test]
    fn foreign_vars_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.constant(Tensor::scalar(1.0));
        let b = t2.constant(Tensor::scalar(1.0));
        assert!(matches!(a.add(&b), Err(Error::ForeignVar)));
    }

    #[test]
    fn constant_only_graph_saves_nothing_and_has_no_grads() {
        let tape = Tape::new();
        let p = tape.param(Tensor::scalar(1.0));
        let c = tape.constant(Tensor::scalar(2.0));
        let y = c.square().add(&p).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.wrt(&p).unwrap().item(), 1.0);
    }
}
