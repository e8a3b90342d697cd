//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! Every operation on a [`Var`] appends a node to its [`Graph`]. The tape is
//! append-only, so insertion order is a valid topological order. [`Graph::grad`]
//! walks the tape backwards; with `create_graph` set, the vector-Jacobian
//! products are themselves recorded as ordinary nodes, which makes the returned
//! gradients differentiable again (gradients of gradients, as needed for
//! meta-learning through inner update steps).
//!
//! Scalars are `1 x 1` matrices and vectors are single rows. A graph is
//! single-threaded; build one graph per worker.
//!
//! ```
//! use metakkl::autodiff::Graph;
//! use ndarray::array;
//!
//! let g = Graph::new();
//! let w = g.param(array![[1.0, 2.0]]);
//! let loss = w.squared_norm();
//! let grads = g.grad(loss, &[w], false).unwrap();
//! assert_eq!(grads[0].value(), array![[2.0, 4.0]]);
//! ```

mod check;

pub use check::{finite_diff_check, FiniteDiffReport};

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

/// Operation kinds accepted by [`Graph::record`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Transpose,
    /// `n x m` plus a `1 x m` row broadcast over all rows.
    AddRow,
    /// `n x m` times a `1 x m` row, column-wise.
    MulRow,
    SumRows,
    Relu,
    Square,
    Exp,
    Sum,
    Mean,
    Scale(f64),
    /// Matrix times a `1 x 1` scalar value.
    ScaleBy,
    /// Column-wise `x * mul + add` with constant coefficients.
    AffineNormalize { mul: Vec<f64>, add: Vec<f64> },
    SquaredNorm,
    /// Column concatenation.
    Concat,
    /// Column slice `[start, end)`.
    Slice { start: usize, end: usize },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    SumRows(usize),
    BroadcastRows(usize),
    BroadcastScalar(usize),
    Relu(usize),
    Square(usize),
    Exp(usize),
    Sum(usize),
    Mean(usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    Affine {
        input: usize,
        mul: Rc<Array1<f64>>,
    },
    SquaredNorm(usize),
    Concat(usize, usize),
    Slice {
        input: usize,
        start: usize,
    },
    Pad {
        input: usize,
        start: usize,
    },
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | AddRow(a, b) | MulRow(a, b)
            | ScaleBy(a, b) | Concat(a, b) => [Some(a), Some(b)],
            Transpose(a) | SumRows(a) | BroadcastRows(a) | BroadcastScalar(a) | Relu(a)
            | Square(a) | Exp(a) | Sum(a) | Mean(a) | Scale(a, _) | SquaredNorm(a) => {
                [Some(a), None]
            }
            Affine { input, .. } | Slice { input, .. } | Pad { input, .. } => [Some(input), None],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({}x{})", self.id, r, c)
    }
}

fn dims(t: &Tensor) -> String {
    format!("{}x{}", t.nrows(), t.ncols())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.parents()
                .iter()
                .flatten()
                .any(|&p| nodes[p].requires_grad)
        };
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    fn value_rc(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Records `kind` applied to `inputs`.
    pub fn record<'g>(&'g self, kind: OpKind, inputs: &[Var<'g>]) -> Result<Var<'g>> {
        let arity = match kind {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::MatMul
            | OpKind::AddRow
            | OpKind::MulRow
            | OpKind::ScaleBy
            | OpKind::Concat => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::shape(
                "record",
                format!("{kind:?} takes {arity} inputs, got {}", inputs.len()),
            ));
        }
        let a = inputs[0];
        match kind {
            OpKind::Add => a.add(inputs[1]),
            OpKind::Sub => a.sub(inputs[1]),
            OpKind::Mul => a.mul(inputs[1]),
            OpKind::MatMul => a.matmul(inputs[1]),
            OpKind::Transpose => Ok(a.t()),
            OpKind::AddRow => a.add_row(inputs[1]),
            OpKind::MulRow => a.mul_row(inputs[1]),
            OpKind::SumRows => Ok(a.sum_rows()),
            OpKind::Relu => Ok(a.relu()),
            OpKind::Square => Ok(a.square()),
            OpKind::Exp => Ok(a.exp()),
            OpKind::Sum => Ok(a.sum()),
            OpKind::Mean => Ok(a.mean()),
            OpKind::Scale(c) => Ok(a.scale(c)),
            OpKind::ScaleBy => a.scale_by(inputs[1]),
            OpKind::AffineNormalize { mul, add } => {
                a.affine(&Array1::from(mul), &Array1::from(add))
            }
            OpKind::SquaredNorm => Ok(a.squared_norm()),
            OpKind::Concat => a.concat(inputs[1]),
            OpKind::Slice { start, end } => a.slice_cols(start, end),
        }
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned gradients are recorded nodes that can be
    /// differentiated again. Without it they are detached constants and the
    /// intermediate backward nodes are dropped from the tape. Inputs outside the
    /// ancestry of `output` get an exact zero gradient.
    pub fn grad<'g>(
        &'g self,
        output: Var<'g>,
        wrt: &[Var<'g>],
        create_graph: bool,
    ) -> Result<Vec<Var<'g>>> {
        let out_shape = output.shape();
        if out_shape != (1, 1) {
            return Err(Error::shape(
                "grad",
                format!("output must be 1x1, got {}x{}", out_shape.0, out_shape.1),
            ));
        }
        if !output.item().is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value {} at differentiated output",
                output.item()
            )));
        }
        for w in wrt {
            if !std::ptr::eq(w.graph, self) {
                return Err(Error::shape("grad", "wrt value belongs to another graph"));
            }
            if !self.nodes.borrow()[w.id].requires_grad {
                return Err(Error::shape(
                    "grad",
                    format!("wrt value #{} does not require gradients", w.id),
                ));
            }
        }

        let n = output.id + 1;
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.id < n {
                relevant[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if !relevant[i] {
                    relevant[i] = nodes[i].op.parents().iter().flatten().any(|&p| relevant[p]);
                }
            }
        }

        let mark = self.len();
        let mut grads: Vec<Option<Var<'g>>> = vec![None; n];
        if relevant[output.id] {
            grads[output.id] = Some(self.scalar(1.0));
        }
        for i in (0..n).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(upstream) = grads[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let node = Var { graph: self, id: i };
            for (parent, g) in self.vjp(&op, node, upstream, &relevant)? {
                grads[parent] = Some(match grads[parent] {
                    Some(acc) => acc.add(g)?,
                    None => g,
                });
            }
        }

        let collected: Vec<Option<Var<'g>>> = wrt
            .iter()
            .map(|w| if w.id < n { grads[w.id] } else { None })
            .collect();

        if create_graph {
            return Ok(collected
                .into_iter()
                .zip(wrt)
                .map(|(g, w)| g.unwrap_or_else(|| self.constant(Array2::zeros(w.shape()))))
                .collect());
        }

        let values: Vec<Tensor> = collected
            .iter()
            .zip(wrt)
            .map(|(g, w)| match g {
                Some(g) => g.value(),
                None => Array2::zeros(w.shape()),
            })
            .collect();
        self.nodes.borrow_mut().truncate(mark);
        Ok(values.into_iter().map(|v| self.constant(v)).collect())
    }

    /// Vector-Jacobian products of one node, expressed as recorded operations.
    fn vjp<'g>(
        &'g self,
        op: &Op,
        node: Var<'g>,
        g: Var<'g>,
        relevant: &[bool],
    ) -> Result<Vec<(usize, Var<'g>)>> {
        let var = |id: usize| Var { graph: self, id };
        let need = |id: usize| relevant[id];
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(a) {
                    out.push((a, g));
                }
                if need(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    out.push((a, g));
                }
                if need(b) {
                    out.push((b, g.scale(-1.0)));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    out.push((a, g.mul(var(b))?));
                }
                if need(b) {
                    out.push((b, g.mul(var(a))?));
                }
            }
            Op::MatMul(a, b) => {
                if need(a) {
                    out.push((a, g.matmul(var(b).t())?));
                }
                if need(b) {
                    out.push((b, var(a).t().matmul(g)?));
                }
            }
            Op::Transpose(a) => {
                if need(a) {
                    out.push((a, g.t()));
                }
            }
            Op::AddRow(a, b) => {
                if need(a) {
                    out.push((a, g));
                }
                if need(b) {
                    out.push((b, g.sum_rows()));
                }
            }
            Op::MulRow(a, b) => {
                if need(a) {
                    out.push((a, g.mul_row(var(b))?));
                }
                if need(b) {
                    out.push((b, g.mul(var(a))?.sum_rows()));
                }
            }
            Op::SumRows(a) => {
                if need(a) {
                    let rows = var(a).shape().0;
                    out.push((a, g.broadcast_rows(rows)));
                }
            }
            Op::BroadcastRows(a) => {
                if need(a) {
                    out.push((a, g.sum_rows()));
                }
            }
            Op::BroadcastScalar(a) => {
                if need(a) {
                    out.push((a, g.sum()));
                }
            }
            Op::Relu(a) => {
                if need(a) {
                    let mask = self.value_rc(a).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    out.push((a, g.mul(self.constant(mask))?));
                }
            }
            Op::Square(a) => {
                if need(a) {
                    out.push((a, g.mul(var(a).scale(2.0))?));
                }
            }
            Op::Exp(a) => {
                if need(a) {
                    out.push((a, g.mul(node)?));
                }
            }
            Op::Sum(a) => {
                if need(a) {
                    out.push((a, g.broadcast_scalar(var(a).shape())?));
                }
            }
            Op::Mean(a) => {
                if need(a) {
                    let shape = var(a).shape();
                    let n = (shape.0 * shape.1) as f64;
                    out.push((a, g.scale(1.0 / n).broadcast_scalar(shape)?));
                }
            }
            Op::Scale(a, c) => {
                if need(a) {
                    out.push((a, g.scale(c)));
                }
            }
            Op::ScaleBy(a, s) => {
                if need(a) {
                    out.push((a, g.scale_by(var(s))?));
                }
                if need(s) {
                    out.push((s, g.mul(var(a))?.sum()));
                }
            }
            Op::Affine { input, ref mul, .. } => {
                if need(input) {
                    let zero = Array1::zeros(mul.len());
                    out.push((input, g.affine(mul, &zero)?));
                }
            }
            Op::SquaredNorm(a) => {
                if need(a) {
                    out.push((a, var(a).scale(2.0).scale_by(g)?));
                }
            }
            Op::Concat(a, b) => {
                let split = var(a).shape().1;
                let total = node.shape().1;
                if need(a) {
                    out.push((a, g.slice_cols(0, split)?));
                }
                if need(b) {
                    out.push((b, g.slice_cols(split, total)?));
                }
            }
            Op::Slice { input, start, .. } => {
                if need(input) {
                    let total = var(input).shape().1;
                    out.push((input, g.pad_cols(start, total)));
                }
            }
            Op::Pad { input, start, .. } => {
                if need(input) {
                    let width = var(input).shape().1;
                    out.push((input, g.slice_cols(start, start + width)?));
                }
            }
        }
        Ok(out)
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    fn rc(&self) -> Rc<Tensor> {
        self.graph.value_rc(self.id)
    }

    pub fn value(&self) -> Tensor {
        (*self.rc()).clone()
    }

    /// Runs `f` on the node value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.with_value(|t| t.dim())
    }

    /// First element; the value of a `1 x 1` scalar.
    pub fn item(&self) -> f64 {
        self.with_value(|t| t[[0, 0]])
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value as a fresh constant leaf.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.value())
    }

    fn same_shape(&self, other: Var<'g>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.rc(), other.rc());
        if a.dim() != b.dim() {
            return Err(Error::shape(op, format!("{} vs {}", dims(&a), dims(&b))));
        }
        Ok((a, b))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.same_shape(other, "add")?;
        Ok(self.graph.push(&*a + &*b, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.same_shape(other, "subtract")?;
        Ok(self.graph.push(&*a - &*b, Op::Sub(self.id, other.id)))
    }

    /// Element-wise product.
    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.same_shape(other, "element-multiply")?;
        Ok(self.graph.push(&*a * &*b, Op::Mul(self.id, other.id)))
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.rc(), other.rc());
        if a.ncols() != b.nrows() {
            return Err(Error::shape(
                "matrix-multiply",
                format!("{} vs {}", dims(&a), dims(&b)),
            ));
        }
        Ok(self.graph.push(a.dot(&*b), Op::MatMul(self.id, other.id)))
    }

    pub fn t(self) -> Var<'g> {
        let a = self.rc();
        let value = a.t().as_standard_layout().into_owned();
        self.graph.push(value, Op::Transpose(self.id))
    }

    fn check_row(&self, row: &Tensor, a: &Tensor, op: &'static str) -> Result<()> {
        if row.nrows() != 1 || row.ncols() != a.ncols() {
            return Err(Error::shape(
                op,
                format!("expected 1x{} row, got {} for {}", a.ncols(), dims(row), dims(a)),
            ));
        }
        Ok(())
    }

    /// Adds a `1 x m` row to every row.
    pub fn add_row(self, row: Var<'g>) -> Result<Var<'g>> {
        let (a, r) = (self.rc(), row.rc());
        self.check_row(&r, &a, "add-row")?;
        Ok(self.graph.push(&*a + &*r, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies every row element-wise by a `1 x m` row.
    pub fn mul_row(self, row: Var<'g>) -> Result<Var<'g>> {
        let (a, r) = (self.rc(), row.rc());
        self.check_row(&r, &a, "multiply-row")?;
        Ok(self.graph.push(&*a * &*r, Op::MulRow(self.id, row.id)))
    }

    /// Column sums as a `1 x m` row.
    pub fn sum_rows(self) -> Var<'g> {
        let a = self.rc();
        let value = a.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.graph.push(value, Op::SumRows(self.id))
    }

    fn broadcast_rows(self, rows: usize) -> Var<'g> {
        let a = self.rc();
        let value = a
            .broadcast((rows, a.ncols()))
            .expect("row vector broadcasts")
            .to_owned();
        self.graph.push(value, Op::BroadcastRows(self.id))
    }

    fn broadcast_scalar(self, shape: (usize, usize)) -> Result<Var<'g>> {
        let a = self.rc();
        if a.dim() != (1, 1) {
            return Err(Error::shape("broadcast", format!("expected 1x1, got {}", dims(&a))));
        }
        let value = Array2::from_elem(shape, a[[0, 0]]);
        Ok(self.graph.push(value, Op::BroadcastScalar(self.id)))
    }

    pub fn relu(self) -> Var<'g> {
        let value = self.rc().mapv(|v| v.max(0.0));
        self.graph.push(value, Op::Relu(self.id))
    }

    pub fn square(self) -> Var<'g> {
        let value = self.rc().mapv(|v| v * v);
        self.graph.push(value, Op::Square(self.id))
    }

    pub fn exp(self) -> Var<'g> {
        let value = self.rc().mapv(f64::exp);
        self.graph.push(value, Op::Exp(self.id))
    }

    pub fn sum(self) -> Var<'g> {
        let value = Array2::from_elem((1, 1), self.rc().sum());
        self.graph.push(value, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let a = self.rc();
        let value = Array2::from_elem((1, 1), a.sum() / a.len() as f64);
        self.graph.push(value, Op::Mean(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let value = &*self.rc() * c;
        self.graph.push(value, Op::Scale(self.id, c))
    }

    /// Multiplies by a `1 x 1` value.
    pub fn scale_by(self, s: Var<'g>) -> Result<Var<'g>> {
        let (a, sv) = (self.rc(), s.rc());
        if sv.dim() != (1, 1) {
            return Err(Error::shape("scale-by", format!("scalar is {}", dims(&sv))));
        }
        Ok(self.graph.push(&*a * sv[[0, 0]], Op::ScaleBy(self.id, s.id)))
    }

    /// Column-wise `x * mul + add` with constant coefficients.
    pub fn affine(self, mul: &Array1<f64>, add: &Array1<f64>) -> Result<Var<'g>> {
        let a = self.rc();
        if mul.len() != a.ncols() || add.len() != a.ncols() {
            return Err(Error::shape(
                "affine-normalize",
                format!(
                    "{} with coefficients of length {} and {}",
                    dims(&a),
                    mul.len(),
                    add.len()
                ),
            ));
        }
        let value = &*a * mul + add;
        Ok(self.graph.push(
            value,
            Op::Affine {
                input: self.id,
                mul: Rc::new(mul.clone()),
            },
        ))
    }

    /// Sum of squares of all entries.
    pub fn squared_norm(self) -> Var<'g> {
        let value = Array2::from_elem((1, 1), self.rc().iter().map(|v| v * v).sum());
        self.graph.push(value, Op::SquaredNorm(self.id))
    }

    /// Concatenates columns.
    pub fn concat(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.rc(), other.rc());
        if a.nrows() != b.nrows() {
            return Err(Error::shape("concat", format!("{} vs {}", dims(&a), dims(&b))));
        }
        let value = ndarray::concatenate(Axis(1), &[a.view(), b.view()])
            .expect("row counts checked");
        Ok(self.graph.push(value, Op::Concat(self.id, other.id)))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'g>> {
        let a = self.rc();
        if start >= end || end > a.ncols() {
            return Err(Error::shape(
                "slice",
                format!("columns {start}..{end} of {}", dims(&a)),
            ));
        }
        let value = a.slice(s![.., start..end]).to_owned();
        Ok(self.graph.push(
            value,
            Op::Slice {
                input: self.id,
                start,
            },
        ))
    }

    fn pad_cols(self, start: usize, total: usize) -> Var<'g> {
        let a = self.rc();
        let mut value = Array2::zeros((a.nrows(), total));
        value
            .slice_mut(s![.., start..start + a.ncols()])
            .assign(&*a);
        self.graph.push(
            value,
            Op::Pad {
                input: self.id,
                start,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forward_values() {
        let g = Graph::new();
        let a = g.constant(array![[1.0, 2.0]]);
        let b = g.constant(array![[3.0, 4.0]]);
        assert_eq!(a.add(b).unwrap().value(), array![[4.0, 6.0]]);
        let r = g.constant(array![[-1.0, 2.0]]);
        assert_eq!(r.relu().value(), array![[0.0, 2.0]]);
        let v = g.constant(array![[3.0, 4.0]]);
        assert_eq!(v.squared_norm().item(), 25.0);
    }

    #[test]
    fn record_dispatch_and_shape_errors() {
        let g = Graph::new();
        let a = g.constant(array![[1.0, 2.0]]);
        let b = g.constant(array![[1.0, 2.0, 3.0]]);
        let err = g.record(OpKind::Add, &[a, b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("1x2") && msg.contains("1x3"), "{msg}");
        assert!(g.record(OpKind::MatMul, &[a, b]).is_err());
        let sum = g.record(OpKind::Add, &[a, a]).unwrap();
        assert_eq!(sum.value(), array![[2.0, 4.0]]);
        assert!(g.record(OpKind::Relu, &[a, a]).is_err());
    }

    #[test]
    fn squared_norm_gradient() {
        let g = Graph::new();
        let w = g.param(array![[1.0, 2.0]]);
        let grads = g.grad(w.squared_norm(), &[w], false).unwrap();
        assert_eq!(grads[0].value(), array![[2.0, 4.0]]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let g = Graph::new();
        let w = g.param(array![[1.0, 2.0]]);
        assert!(g.grad(w, &[w], false).is_err());
    }

    #[test]
    fn unrelated_input_gets_exact_zero() {
        let g = Graph::new();
        let w = g.param(array![[1.0, 2.0]]);
        let u = g.param(array![[5.0, 6.0, 7.0]]);
        let grads = g.grad(w.squared_norm(), &[w, u], true).unwrap();
        assert_eq!(grads[1].value(), Array2::<f64>::zeros((1, 3)));
    }

    #[test]
    fn fan_out_accumulates() {
        let g = Graph::new();
        let w = g.param(array![[3.0]]);
        // w*w + w -> 2w + 1
        let y = w.mul(w).unwrap().add(w).unwrap().sum();
        let grads = g.grad(y, &[w], false).unwrap();
        assert_eq!(grads[0].item(), 7.0);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let g = Graph::new();
        let w = g.param(array![[0.0, 1.0, -1.0]]);
        let grads = g.grad(w.relu().sum(), &[w], false).unwrap();
        assert_eq!(grads[0].value(), array![[0.0, 1.0, 0.0]]);
    }

    #[test]
    fn detached_backward_truncates_tape() {
        let g = Graph::new();
        let w = g.param(array![[1.0, 2.0]]);
        let y = w.square().sum();
        let before = g.len();
        let grads = g.grad(y, &[w], false).unwrap();
        assert_eq!(g.len(), before + 1);
        assert!(!grads[0].requires_grad());
    }

    #[test]
    fn scalar_maml_toy_second_order() {
        // f(eta) = eta^2; eta_i = eta - alpha * f'(eta); outer loss eta_i^2.
        let g = Graph::new();
        let eta = g.param(array![[1.0]]);
        let alpha = g.param(array![[0.1]]);
        let inner = eta.square().sum();
        let d = g.grad(inner, &[eta], true).unwrap()[0];
        let adapted = eta.sub(d.scale_by(alpha).unwrap()).unwrap();
        let outer = adapted.square().sum();
        let grads = g.grad(outer, &[eta, alpha], false).unwrap();
        assert!((grads[0].item() - 1.28).abs() < 1e-12);
        assert!((grads[1].item() - (-3.2)).abs() < 1e-12);
    }

    #[test]
    fn nonfinite_output_is_an_error() {
        let g = Graph::new();
        let w = g.param(array![[f64::NAN]]);
        let err = g.grad(w.sum(), &[w], false).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn wrt_must_require_grad() {
        let g = Graph::new();
        let c = g.constant(array![[1.0]]);
        assert!(g.grad(c.sum(), &[c], false).is_err());
    }
}
