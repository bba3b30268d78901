//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is built symbolically: parameter slots are declared with
//! [`Tape::param`], constants with [`Tape::constant`], and every operation
//! appends one node whose shape is inferred (and checked) at construction
//! time. [`Tape::forward_eval`] binds tensors to the parameter slots and
//! caches all intermediate values; [`Tape::backward_grad`] then returns the
//! gradient of the terminal scalar with respect to every slot, concatenated
//! in slot order.
//!
//! Tensors are at most rank 2. A rank-1 tensor of length `n` behaves as an
//! `n x 1` column in matrix products; the only broadcast supported is adding
//! a column vector to every column of a matrix ([`Tape::add_bias`]).
//!
//! ```
//! use sparsets::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(&[]);
//! let y = tape.param(&[]);
//! let _ = tape.mul(x, y).unwrap();
//! let v = tape.forward_eval(&[Tensor::scalar(2.0), Tensor::scalar(3.0)]).unwrap();
//! assert_eq!(v, 6.0);
//! assert_eq!(tape.backward_grad().unwrap().values, vec![3.0, 2.0]);
//! ```

use crate::error::{Error, Result};

/// Dense row-major tensor of rank 0, 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 {
            return Err(Error::Shape(format!("rank {} tensors are not supported", shape.len())));
        }
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {i} is {}", data[i])));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    /// Length-`n` vector.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
    }

    /// `rows x cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Gradient aligned index-for-index with the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Square,
    Sum,
    Mean,
    Scale(f64),
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    MatMul,
    Add,
    Sub,
    Mul,
    AddBias,
}

#[derive(Debug, Clone)]
enum Op {
    Const(Vec<f64>),
    Param(usize),
    Unary(Unary, NodeId),
    Binary(Binary, NodeId, NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    needs_grad: bool,
}

impl Node {
    fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

/// Append-only record of operations.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    slots: Vec<(Vec<usize>, NodeId)>,
    values: Vec<Vec<f64>>,
    evaluated: bool,
}

fn dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (shape[0], 1),
        _ => (shape[0], shape[1]),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of values a flat binding must supply.
    pub fn param_len(&self) -> usize {
        self.slots.iter().map(|(s, _)| s.iter().product::<usize>()).sum()
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, needs_grad: bool) -> NodeId {
        self.evaluated = false;
        self.nodes.push(Node { op, rows, cols, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::State(format!("node {} does not exist", id.0)))
    }

    /// Declares a parameter slot of the given shape. Slots are bound in
    /// declaration order.
    pub fn param(&mut self, shape: &[usize]) -> NodeId {
        let (r, c) = dims(shape);
        let slot = self.slots.len();
        let id = self.push(Op::Param(slot), r, c, true);
        self.slots.push((shape.to_vec(), id));
        id
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let (r, c) = dims(&t.shape);
        self.push(Op::Const(t.data), r, c, false)
    }

    fn unary(&mut self, u: Unary, a: NodeId) -> Result<NodeId> {
        let n = self.node(a)?;
        let (r, c, g) = match u {
            Unary::Sum | Unary::Mean => (1, 1, n.needs_grad),
            _ => (n.rows, n.cols, n.needs_grad),
        };
        Ok(self.push(Op::Unary(u, a), r, c, g))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sigmoid, a)
    }

    /// ReLU with subgradient 0 at the origin.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Relu, a)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Square, a)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sum, a)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Mean, a)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite(format!("scale factor {factor}")));
        }
        self.unary(Unary::Scale(factor), a)
    }

    fn binary(&mut self, b: Binary, x: NodeId, y: NodeId) -> Result<NodeId> {
        let nx = self.node(x)?;
        let ny = self.node(y)?;
        let g = nx.needs_grad || ny.needs_grad;
        let (r, c) = match b {
            Binary::MatMul => {
                if nx.cols != ny.rows {
                    return Err(Error::Shape(format!(
                        "matmul {}x{} by {}x{}",
                        nx.rows, nx.cols, ny.rows, ny.cols
                    )));
                }
                (nx.rows, ny.cols)
            }
            Binary::Add | Binary::Sub | Binary::Mul => {
                if (nx.rows, nx.cols) != (ny.rows, ny.cols) {
                    return Err(Error::Shape(format!(
                        "elementwise op on {}x{} and {}x{}",
                        nx.rows, nx.cols, ny.rows, ny.cols
                    )));
                }
                (nx.rows, nx.cols)
            }
            Binary::AddBias => {
                if ny.cols != 1 || ny.rows != nx.rows {
                    return Err(Error::Shape(format!(
                        "bias {}x{} does not broadcast over {}x{}",
                        ny.rows, ny.cols, nx.rows, nx.cols
                    )));
                }
                (nx.rows, nx.cols)
            }
        };
        Ok(self.push(Op::Binary(b, x, y), r, c, g))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::MatMul, a, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    /// `a + bias` with the column vector `bias` added to every column of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.binary(Binary::AddBias, a, bias)
    }

    /// Binds one tensor per slot, evaluates every node and returns the value
    /// of the terminal (last) node, which must be scalar.
    pub fn forward_eval(&mut self, bindings: &[Tensor]) -> Result<f64> {
        if bindings.len() != self.slots.len() {
            return Err(Error::Shape(format!(
                "{} bindings for {} parameter slots",
                bindings.len(),
                self.slots.len()
            )));
        }
        for (i, (t, (shape, _))) in bindings.iter().zip(&self.slots).enumerate() {
            if dims(&t.shape) != dims(shape) {
                return Err(Error::Shape(format!(
                    "slot {i} declared {shape:?}, bound {:?}",
                    t.shape
                )));
            }
        }
        let parts: Vec<&[f64]> = bindings.iter().map(|t| t.data.as_slice()).collect();
        self.evaluate_parts(&parts)?;
        self.terminal_scalar()
    }

    /// Like [`Tape::forward_eval`] but binds the slots to consecutive chunks
    /// of one flat parameter vector.
    pub fn forward_eval_flat(&mut self, flat: &[f64]) -> Result<f64> {
        self.evaluate_flat(flat)?;
        self.terminal_scalar()
    }

    /// Evaluates every node without requiring a scalar terminal.
    pub fn evaluate_flat(&mut self, flat: &[f64]) -> Result<()> {
        let need = self.param_len();
        if flat.len() != need {
            return Err(Error::Shape(format!(
                "flat binding has {} values, slots need {need}",
                flat.len()
            )));
        }
        let mut parts = Vec::with_capacity(self.slots.len());
        let mut off = 0;
        for (shape, _) in &self.slots {
            let n: usize = shape.iter().product();
            parts.push(&flat[off..off + n]);
            off += n;
        }
        self.evaluate_parts(&parts)
    }

    fn terminal_scalar(&self) -> Result<f64> {
        let last = self
            .nodes
            .last()
            .ok_or_else(|| Error::State("empty tape".into()))?;
        if last.numel() != 1 {
            return Err(Error::Shape(format!(
                "terminal node is {}x{}, expected a scalar",
                last.rows, last.cols
            )));
        }
        Ok(self.values[self.nodes.len() - 1][0])
    }

    /// Cached value of a node after evaluation.
    pub fn value(&self, id: NodeId) -> Result<&[f64]> {
        if !self.evaluated {
            return Err(Error::State("tape has not been evaluated".into()));
        }
        self.values
            .get(id.0)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::State(format!("node {} does not exist", id.0)))
    }

    fn evaluate_parts(&mut self, parts: &[&[f64]]) -> Result<()> {
        if let Some(p) = parts.iter().flat_map(|p| p.iter()).find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("bound parameter value {p}")));
        }
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Const(d) => d.clone(),
                Op::Param(s) => parts[*s].to_vec(),
                Op::Unary(u, a) => {
                    let x = &values[a.0];
                    match u {
                        Unary::Tanh => x.iter().map(|v| v.tanh()).collect(),
                        Unary::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
                        Unary::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                        Unary::Square => x.iter().map(|v| v * v).collect(),
                        Unary::Sum => vec![x.iter().sum()],
                        Unary::Mean => vec![x.iter().sum::<f64>() / x.len() as f64],
                        Unary::Scale(f) => x.iter().map(|v| v * f).collect(),
                    }
                }
                Op::Binary(b, a, c) => {
                    let x = &values[a.0];
                    let y = &values[c.0];
                    match b {
                        Binary::MatMul => {
                            let na = &self.nodes[a.0];
                            let nc = &self.nodes[c.0];
                            let mut out = vec![0.0; na.rows * nc.cols];
                            gemm(na.rows, na.cols, nc.cols, x, false, y, false, &mut out, false);
                            out
                        }
                        Binary::Add => x.iter().zip(y).map(|(p, q)| p + q).collect(),
                        Binary::Sub => x.iter().zip(y).map(|(p, q)| p - q).collect(),
                        Binary::Mul => x.iter().zip(y).map(|(p, q)| p * q).collect(),
                        Binary::AddBias => {
                            let cols = node.cols;
                            x.iter()
                                .enumerate()
                                .map(|(k, p)| p + y[k / cols])
                                .collect()
                        }
                    }
                }
            };
            values.push(v);
        }
        self.values = values;
        self.evaluated = true;
        Ok(())
    }

    /// Gradient of the terminal scalar with respect to every parameter slot,
    /// concatenated in slot order.
    pub fn backward_grad(&self) -> Result<GradientVector> {
        if !self.evaluated {
            return Err(Error::State("backward_grad called before forward_eval".into()));
        }
        self.terminal_scalar()?;
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[n - 1] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Const(_) => {}
                Op::Param(_) => {
                    adj[i] = Some(g);
                }
                Op::Unary(u, a) => {
                    let x = &self.values[a.0];
                    let y = &self.values[i];
                    let d: Vec<f64> = match u {
                        Unary::Tanh => g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect(),
                        Unary::Sigmoid => g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect(),
                        Unary::Relu => g
                            .iter()
                            .zip(x)
                            .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                            .collect(),
                        Unary::Square => g.iter().zip(x).map(|(g, v)| 2.0 * v * g).collect(),
                        Unary::Sum => vec![g[0]; x.len()],
                        Unary::Mean => vec![g[0] / x.len() as f64; x.len()],
                        Unary::Scale(f) => g.iter().map(|g| g * f).collect(),
                    };
                    accumulate(&mut adj, &self.nodes, *a, d);
                }
                Op::Binary(b, a, c) => {
                    let (na, nc) = (&self.nodes[a.0], &self.nodes[c.0]);
                    match b {
                        Binary::MatMul => {
                            if na.needs_grad {
                                let mut d = vec![0.0; na.numel()];
                                gemm(
                                    na.rows,
                                    node.cols,
                                    na.cols,
                                    &g,
                                    false,
                                    &self.values[c.0],
                                    true,
                                    &mut d,
                                    false,
                                );
                                accumulate(&mut adj, &self.nodes, *a, d);
                            }
                            if nc.needs_grad {
                                let mut d = vec![0.0; nc.numel()];
                                gemm(
                                    nc.rows,
                                    na.rows,
                                    nc.cols,
                                    &self.values[a.0],
                                    true,
                                    &g,
                                    false,
                                    &mut d,
                                    false,
                                );
                                accumulate(&mut adj, &self.nodes, *c, d);
                            }
                        }
                        Binary::Add => {
                            if nc.needs_grad {
                                accumulate(&mut adj, &self.nodes, *c, g.clone());
                            }
                            accumulate(&mut adj, &self.nodes, *a, g);
                        }
                        Binary::Sub => {
                            if nc.needs_grad {
                                accumulate(&mut adj, &self.nodes, *c, g.iter().map(|v| -v).collect());
                            }
                            accumulate(&mut adj, &self.nodes, *a, g);
                        }
                        Binary::Mul => {
                            if nc.needs_grad {
                                let d = g.iter().zip(&self.values[a.0]).map(|(g, x)| g * x).collect();
                                accumulate(&mut adj, &self.nodes, *c, d);
                            }
                            if na.needs_grad {
                                let d = g.iter().zip(&self.values[c.0]).map(|(g, y)| g * y).collect();
                                accumulate(&mut adj, &self.nodes, *a, d);
                            }
                        }
                        Binary::AddBias => {
                            if nc.needs_grad {
                                let cols = node.cols;
                                let d = g.chunks(cols).map(|row| row.iter().sum()).collect();
                                accumulate(&mut adj, &self.nodes, *c, d);
                            }
                            accumulate(&mut adj, &self.nodes, *a, g);
                        }
                    }
                }
            }
        }
        let mut values = Vec::with_capacity(self.param_len());
        for (shape, id) in &self.slots {
            match adj[id.0].take() {
                Some(g) => values.extend(g),
                None => values.extend(std::iter::repeat_n(0.0, shape.iter().product())),
            }
        }
        Ok(GradientVector { values })
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, d: Vec<f64>) {
    if !nodes[id.0].needs_grad {
        return;
    }
    match &mut adj[id.0] {
        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d),
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

/// `out (m x n) = op(a) (m x k) * op(b) (k x n)`, optionally accumulating.
/// `a_t`/`b_t` mean the stored row-major buffer holds the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are asserted above and the strides describe
    // row-major (or transposed row-major) layouts within those lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Per-entry `|a - n| / max(|a|, |n|, 1e-3)`.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    /// Indices whose error exceeds the tolerance.
    pub flagged: Vec<usize>,
}

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

pub(crate) fn rel_error(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-3);
    (a - n).abs() / denom
}

/// Compares the tape's analytic gradient at `flat` with central finite
/// differences of step `step`.
pub fn check_gradient(tape: &mut Tape, flat: &[f64], step: f64, tol: f64) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step {step} must be > 0")));
    }
    tape.forward_eval_flat(flat)?;
    let analytic = tape.backward_grad()?.values;
    let mut x = flat.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let orig = x[j];
        x[j] = orig + step;
        let fp = tape.forward_eval_flat(&x)?;
        x[j] = orig - step;
        let fm = tape.forward_eval_flat(&x)?;
        x[j] = orig;
        numeric.push((fp - fm) / (2.0 * step));
    }
    // leave the tape evaluated at the requested point
    tape.forward_eval_flat(flat)?;
    let rel_errors: Vec<f64> = analytic.iter().zip(&numeric).map(|(&a, &n)| rel_error(a, n)).collect();
    let max_rel_error = rel_errors.iter().cloned().fold(0.0, f64::max);
    let flagged = rel_errors
        .iter()
        .enumerate()
        .filter(|(_, e)| **e > tol)
        .map(|(i, _)| i)
        .collect();
    Ok(GradCheckReport { analytic, numeric, rel_errors, max_rel_error, flagged })
}
