//! Define-by-run reverse-mode automatic differentiation over dense `f64`
//! matrices.
//!
//! Every operation appends a node to a [`Tape`] with its forward value
//! already computed. Nodes are identified by [`Var`] handles, which are
//! plain indices into the tape, so a node's parents always precede it.
//! [`Tape::backward`] walks the tape in reverse once, accumulating adjoints
//! additively into every node that requires a gradient.
//!
//! Broadcasting is never implicit: binary elementwise ops require equal
//! shapes, and [`Tape::broadcast`] must be used to expand a row, column or
//! scalar first.

mod gradcheck;
mod tensor;

use std::fmt;
use std::ops::Range;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamReport};
pub use tensor::{Shape, Tensor};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction axis. `Rows` collapses the row dimension (`r x c -> 1 x c`),
/// `Cols` collapses the column dimension (`r x c -> r x 1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Exp,
    Log,
    Square,
    Sqrt,
    Relu,
    Sum,
    Mean,
    MaxOverAxis,
    LogSumExp,
    Broadcast,
    Concat,
    Slice,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul_elementwise",
            OpKind::Scale => "scale",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Relu => "relu",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MaxOverAxis => "max_over_axis",
            OpKind::LogSumExp => "log_sum_exp",
            OpKind::Broadcast => "broadcast",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Relu(Var),
    Sum(Var, Option<Axis>),
    Mean(Var, Option<Axis>),
    /// Stores the arg-max index along the reduced axis for each output slot.
    MaxOverAxis(Var, Axis, Vec<usize>),
    LogSumExp(Var, Axis),
    Broadcast(Var),
    Concat(Vec<Var>, Axis),
    Slice(Var, Axis, Range<usize>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Square(_) => OpKind::Square,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Relu(_) => OpKind::Relu,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::MaxOverAxis(..) => OpKind::MaxOverAxis,
            Op::LogSumExp(..) => OpKind::LogSumExp,
            Op::Broadcast(_) => OpKind::Broadcast,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice(..) => OpKind::Slice,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::MaxOverAxis(a, ..)
            | Op::LogSumExp(a, _)
            | Op::Broadcast(a)
            | Op::Slice(a, ..) => vec![*a],
            Op::Concat(parts, _) => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of nodes in creation order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// A leaf that accumulates gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never accumulates gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient, or `None` if nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Accumulated gradient with zeros when nothing flowed into `v`.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shape(v);
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn same_shape(&self, op: OpKind, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.rows(), ta.cols(), data).expect("shapes checked")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::ShapeMismatch {
                op: OpKind::MatMul,
                lhs: sa,
                rhs: sb,
            });
        }
        let value = self.value(a).matmul(self.value(b));
        Ok(self.push_op(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(OpKind::Add, a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push_op(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(OpKind::Sub, a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push_op(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(OpKind::Mul, a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push_op(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| factor * x);
        self.push_op(value, Op::Scale(a, factor))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push_op(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: OpKind::Log,
                value: bad,
            });
        }
        let value = self.value(a).map(f64::ln);
        Ok(self.push_op(value, Op::Log(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push_op(value, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: OpKind::Sqrt,
                value: bad,
            });
        }
        let value = self.value(a).map(f64::sqrt);
        Ok(self.push_op(value, Op::Sqrt(a)))
    }

    /// `max(0, x)`; the adjoint at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push_op(value, Op::Relu(a))
    }

    /// Sum of all entries (`axis = None`, result `1 x 1`) or along an axis.
    pub fn sum(&mut self, a: Var, axis: Option<Axis>) -> Var {
        let value = reduce_sum(self.value(a), axis);
        self.push_op(value, Op::Sum(a, axis))
    }

    pub fn mean(&mut self, a: Var, axis: Option<Axis>) -> Var {
        let t = self.value(a);
        let count = match axis {
            None => t.len(),
            Some(Axis::Rows) => t.rows(),
            Some(Axis::Cols) => t.cols(),
        } as f64;
        let value = reduce_sum(t, axis).map(|s| s / count);
        self.push_op(value, Op::Mean(a, axis))
    }

    /// Maximum along an axis. Ties resolve to the first maximal entry, which
    /// alone receives the adjoint.
    pub fn max_over_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::ShapeMismatch {
                op: OpKind::MaxOverAxis,
                lhs: t.shape(),
                rhs: (0, 0),
            });
        }
        let (r, c) = t.shape();
        let (out_len, inner) = match axis {
            Axis::Rows => (c, r),
            Axis::Cols => (r, c),
        };
        let mut arg = Vec::with_capacity(out_len);
        let mut out = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let at = |i: usize| match axis {
                Axis::Rows => t.get(i, o),
                Axis::Cols => t.get(o, i),
            };
            let mut best = 0;
            for i in 1..inner {
                if at(i) > at(best) {
                    best = i;
                }
            }
            arg.push(best);
            out.push(at(best));
        }
        let value = match axis {
            Axis::Rows => Tensor::new(1, c, out)?,
            Axis::Cols => Tensor::new(r, 1, out)?,
        };
        Ok(self.push_op(value, Op::MaxOverAxis(a, axis, arg)))
    }

    /// `log Σ exp(x)` along an axis, shifted by the maximum for stability.
    pub fn log_sum_exp(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::ShapeMismatch {
                op: OpKind::LogSumExp,
                lhs: t.shape(),
                rhs: (0, 0),
            });
        }
        let value = log_sum_exp_values(t, axis);
        Ok(self.push_op(value, Op::LogSumExp(a, axis)))
    }

    /// Expands a `1 x c`, `r x 1` or `1 x 1` node to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: Shape) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.shape();
        let ok = (r == shape.0 || r == 1) && (c == shape.1 || c == 1);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: OpKind::Broadcast,
                lhs: (r, c),
                rhs: shape,
            });
        }
        let value = Tensor::from_fn(shape.0, shape.1, |i, j| {
            t.get(if r == 1 { 0 } else { i }, if c == 1 { 0 } else { j })
        });
        Ok(self.push_op(value, Op::Broadcast(a)))
    }

    /// Stacks nodes vertically (`Axis::Rows`) or side by side (`Axis::Cols`).
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat of zero nodes".into()));
        };
        let base = self.shape(first);
        for &p in &parts[1..] {
            let s = self.shape(p);
            let compatible = match axis {
                Axis::Rows => s.1 == base.1,
                Axis::Cols => s.0 == base.0,
            };
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: OpKind::Concat,
                    lhs: base,
                    rhs: s,
                });
            }
        }
        let value = match axis {
            Axis::Rows => {
                let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
                let mut data = Vec::with_capacity(rows * base.1);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new(rows, base.1, data)?
            }
            Axis::Cols => {
                let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
                let mut data = Vec::with_capacity(base.0 * cols);
                for i in 0..base.0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(i));
                    }
                }
                Tensor::new(base.0, cols, data)?
            }
        };
        Ok(self.push_op(value, Op::Concat(parts.to_vec(), axis)))
    }

    /// Selects a contiguous range of rows or columns.
    pub fn slice(&mut self, a: Var, axis: Axis, range: Range<usize>) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.shape();
        let limit = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if range.start > range.end || range.end > limit {
            return Err(Error::ShapeMismatch {
                op: OpKind::Slice,
                lhs: (r, c),
                rhs: (range.start, range.end),
            });
        }
        let value = match axis {
            Axis::Rows => Tensor::new(
                range.len(),
                c,
                t.data()[range.start * c..range.end * c].to_vec(),
            )?,
            Axis::Cols => Tensor::from_fn(r, range.len(), |i, j| t.get(i, range.start + j)),
        };
        Ok(self.push_op(value, Op::Slice(a, axis, range)))
    }

    // Composites built only from the primitives above.

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let shape = self.shape(a);
        let k = self.constant(Tensor::scalar(c));
        let kb = self.broadcast(k, shape)?;
        self.add(a, kb)
    }

    /// `1 / x` for strictly positive `x`, as `exp(-log x)`.
    pub fn recip_positive(&mut self, a: Var) -> Result<Var> {
        let l = self.log(a)?;
        let n = self.scale(l, -1.0);
        Ok(self.exp(n))
    }

    /// `max(x, floor)` as `relu(x - floor) + floor`.
    pub fn floor_at(&mut self, a: Var, floor: f64) -> Result<Var> {
        let shifted = self.add_scalar(a, -floor)?;
        let r = self.relu(shifted);
        self.add_scalar(r, floor)
    }

    /// Runs reverse accumulation from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::StaleTape);
        }
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::NonScalarRoot(shape));
        }
        self.backward_done = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let (before, after) = self.nodes.split_at_mut(i);
            propagate(before, &after[0], &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Clears every accumulated gradient so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }
}

fn reduce_sum(t: &Tensor, axis: Option<Axis>) -> Tensor {
    let (r, c) = t.shape();
    match axis {
        None => Tensor::scalar(t.data().iter().sum()),
        Some(Axis::Rows) => {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                    *o += v;
                }
            }
            Tensor::row(&out)
        }
        Some(Axis::Cols) => {
            let out: Vec<f64> = (0..r).map(|i| t.row_slice(i).iter().sum()).collect();
            Tensor::column(&out)
        }
    }
}

fn log_sum_exp_values(t: &Tensor, axis: Axis) -> Tensor {
    let lse = |vals: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = vals.collect();
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let (r, c) = t.shape();
    match axis {
        Axis::Rows => {
            let out: Vec<f64> = (0..c)
                .map(|j| lse(&mut (0..r).map(|i| t.get(i, j))))
                .collect();
            Tensor::row(&out)
        }
        Axis::Cols => {
            let out: Vec<f64> = (0..r)
                .map(|i| lse(&mut t.row_slice(i).iter().copied()))
                .collect();
            Tensor::column(&out)
        }
    }
}

fn accumulate(nodes: &mut [Node], v: Var, f: impl FnOnce(&mut Tensor)) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let grad = node.grad.get_or_insert_with(|| {
        let (r, c) = node.value.shape();
        Tensor::zeros(r, c)
    });
    f(grad);
}

fn add_into(dst: &mut Tensor, src: &Tensor, factor: f64) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += factor * s;
    }
}

/// Pushes the adjoint `g` of `node` into its parents, all of which live in
/// `before`.
fn propagate(before: &mut [Node], node: &Node, g: &Tensor) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if before[a.0].requires_grad {
                let da = g.matmul_t(&before[b.0].value);
                accumulate(before, *a, |acc| add_into(acc, &da, 1.0));
            }
            if before[b.0].requires_grad {
                let db = before[a.0].value.t_matmul(g);
                accumulate(before, *b, |acc| add_into(acc, &db, 1.0));
            }
        }
        Op::Add(a, b) => {
            accumulate(before, *a, |acc| add_into(acc, g, 1.0));
            accumulate(before, *b, |acc| add_into(acc, g, 1.0));
        }
        Op::Sub(a, b) => {
            accumulate(before, *a, |acc| add_into(acc, g, 1.0));
            accumulate(before, *b, |acc| add_into(acc, g, -1.0));
        }
        Op::Mul(a, b) => {
            if before[a.0].requires_grad {
                let other = before[b.0].value.clone();
                accumulate(before, *a, |acc| {
                    for ((d, gv), o) in acc.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
                        *d += gv * o;
                    }
                });
            }
            if before[b.0].requires_grad {
                let other = before[a.0].value.clone();
                accumulate(before, *b, |acc| {
                    for ((d, gv), o) in acc.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
                        *d += gv * o;
                    }
                });
            }
        }
        Op::Scale(a, k) => accumulate(before, *a, |acc| add_into(acc, g, *k)),
        Op::Exp(a) => {
            let y = &node.value;
            accumulate(before, *a, |acc| {
                for ((d, gv), yv) in acc.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *d += gv * yv;
                }
            });
        }
        Op::Log(a) => {
            let x = before[a.0].value.clone();
            accumulate(before, *a, |acc| {
                for ((d, gv), xv) in acc.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                    *d += gv / xv;
                }
            });
        }
        Op::Square(a) => {
            let x = before[a.0].value.clone();
            accumulate(before, *a, |acc| {
                for ((d, gv), xv) in acc.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                    *d += 2.0 * xv * gv;
                }
            });
        }
        Op::Sqrt(a) => {
            let y = &node.value;
            accumulate(before, *a, |acc| {
                for ((d, gv), yv) in acc.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *d += gv / (2.0 * yv);
                }
            });
        }
        Op::Relu(a) => {
            let x = before[a.0].value.clone();
            accumulate(before, *a, |acc| {
                for ((d, gv), xv) in acc.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                    if *xv > 0.0 {
                        *d += gv;
                    }
                }
            });
        }
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            let (r, c) = before[a.0].value.shape();
            let divisor = match (&node.op, axis) {
                (Op::Sum(..), _) => 1.0,
                (_, None) => (r * c) as f64,
                (_, Some(Axis::Rows)) => r as f64,
                (_, Some(Axis::Cols)) => c as f64,
            };
            accumulate(before, *a, |acc| {
                for i in 0..r {
                    for j in 0..c {
                        let gv = match axis {
                            None => g.get(0, 0),
                            Some(Axis::Rows) => g.get(0, j),
                            Some(Axis::Cols) => g.get(i, 0),
                        };
                        let cur = acc.get(i, j);
                        acc.set(i, j, cur + gv / divisor);
                    }
                }
            });
        }
        Op::MaxOverAxis(a, axis, arg) => {
            accumulate(before, *a, |acc| {
                for (o, &i) in arg.iter().enumerate() {
                    let (ri, ci, gv) = match axis {
                        Axis::Rows => (i, o, g.get(0, o)),
                        Axis::Cols => (o, i, g.get(o, 0)),
                    };
                    let cur = acc.get(ri, ci);
                    acc.set(ri, ci, cur + gv);
                }
            });
        }
        Op::LogSumExp(a, axis) => {
            let x = before[a.0].value.clone();
            let y = &node.value;
            let (r, c) = x.shape();
            accumulate(before, *a, |acc| {
                for i in 0..r {
                    for j in 0..c {
                        let (lse, gv) = match axis {
                            Axis::Rows => (y.get(0, j), g.get(0, j)),
                            Axis::Cols => (y.get(i, 0), g.get(i, 0)),
                        };
                        let p = (x.get(i, j) - lse).exp();
                        let cur = acc.get(i, j);
                        acc.set(i, j, cur + gv * p);
                    }
                }
            });
        }
        Op::Broadcast(a) => {
            let (r, c) = before[a.0].value.shape();
            let (gr, gc) = g.shape();
            accumulate(before, *a, |acc| {
                for i in 0..gr {
                    for j in 0..gc {
                        let (si, sj) = (if r == 1 { 0 } else { i }, if c == 1 { 0 } else { j });
                        let cur = acc.get(si, sj);
                        acc.set(si, sj, cur + g.get(i, j));
                    }
                }
            });
        }
        Op::Concat(parts, axis) => {
            let mut offset = 0;
            for &p in parts {
                let (r, c) = before[p.0].value.shape();
                let off = offset;
                accumulate(before, p, |acc| {
                    for i in 0..r {
                        for j in 0..c {
                            let gv = match axis {
                                Axis::Rows => g.get(off + i, j),
                                Axis::Cols => g.get(i, off + j),
                            };
                            let cur = acc.get(i, j);
                            acc.set(i, j, cur + gv);
                        }
                    }
                });
                offset += match axis {
                    Axis::Rows => r,
                    Axis::Cols => c,
                };
            }
        }
        Op::Slice(a, axis, range) => {
            let (gr, gc) = g.shape();
            accumulate(before, *a, |acc| {
                for i in 0..gr {
                    for j in 0..gc {
                        let (si, sj) = match axis {
                            Axis::Rows => (range.start + i, j),
                            Axis::Cols => (i, range.start + j),
                        };
                        let cur = acc.get(si, sj);
                        acc.set(si, sj, cur + g.get(i, j));
                    }
                }
            });
        }
    }
}
