//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! Every operation appends a node to a [`Tape`]. [`Tape::grad`] walks the
//! tape backwards and records the adjoint computation as new nodes on the
//! same tape, so a gradient is itself a differentiable expression: calling
//! `grad` on a value that depends on an earlier gradient yields exact
//! second-order derivatives (Hessian-vector products, gradients through an
//! unrolled optimizer step).
//!
//! Non-smooth points use fixed masks: the rectifier's derivative at 0 is 0,
//! and a clamped entry sitting exactly on the floor receives no gradient.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Var,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Sum(Var),
    BroadcastScalar(Var),
    Exp(Var),
    Log(Var),
    LogSoftmax(Var),
    /// Elementwise product with a constant 0/1 mask stored in `Tape::masks`.
    Mask(Var, usize),
}

impl Op {
    fn parents(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Var | Const => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | AddRow(a, b) => {
                [Some(a), Some(b)]
            }
            Neg(a)
            | Scale(a, _)
            | Transpose(a)
            | SumRows(a)
            | SumCols(a)
            | BroadcastRows(a)
            | BroadcastCols(a)
            | Sum(a)
            | BroadcastScalar(a)
            | Exp(a)
            | Log(a)
            | LogSoftmax(a)
            | Mask(a, _) => [Some(a), None],
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    masks: Vec<Matrix>,
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn var(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Var)
    }

    /// A recorded value that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(value, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -x);
        self.push(value, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// `a + 1 b`: adds the single row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add_row(self.value(b));
        self.push(value, Op::AddRow(a, b))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_rows();
        self.push(value, Op::SumRows(a))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_cols();
        self.push(value, Op::SumCols(a))
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let value = self.value(a).broadcast_rows(rows);
        self.push(value, Op::BroadcastRows(a))
    }

    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let value = self.value(a).broadcast_cols(cols);
        self.push(value, Op::BroadcastCols(a))
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).item();
        self.push(Matrix::filled(rows, cols, v), Op::BroadcastScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    /// Row-wise log-softmax, stabilised by max-subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push(value, Op::LogSoftmax(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let ls = self.log_softmax(a);
        self.exp(ls)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.apply_mask(a, mask)
    }

    /// `max(a, floor)` entrywise.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a);
        if v.as_slice().iter().all(|&x| x > floor) {
            return a;
        }
        let mask = v.map(|x| if x > floor { 1.0 } else { 0.0 });
        let masked = self.apply_mask(a, mask.clone());
        let fill = mask.map(|m| (1.0 - m) * floor);
        let fill = self.constant(fill);
        self.add(masked, fill)
    }

    fn apply_mask(&mut self, a: Var, mask: Matrix) -> Var {
        let value = self.value(a).zip_map(&mask, |x, m| x * m);
        self.masks.push(mask);
        let id = self.masks.len() - 1;
        self.push(value, Op::Mask(a, id))
    }

    fn mask_again(&mut self, a: Var, id: usize) -> Var {
        let value = self.value(a).zip_map(&self.masks[id], |x, m| x * m);
        self.push(value, Op::Mask(a, id))
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// The returned handles are themselves recorded nodes, so they may be
    /// used inside a larger computation and differentiated again.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::dims(
                "Tape::grad loss",
                "1x1",
                format!("{:?}", self.value(loss).shape()),
            ));
        }
        for &w in wrt {
            if w.0 > loss.0 || matches!(self.nodes[w.0].op, Op::Const) {
                return Err(Error::Detached(w.0));
            }
        }

        // Only nodes downstream of some `wrt` entry need adjoints.
        let end = loss.0 + 1;
        let mut live = vec![false; end];
        for &w in wrt {
            live[w.0] = true;
        }
        for i in 0..end {
            if !live[i] {
                live[i] = self.nodes[i]
                    .op
                    .parents()
                    .iter()
                    .flatten()
                    .any(|p| live[p.0]);
            }
        }
        let mut adj: Vec<Option<Var>> = vec![None; end];
        adj[loss.0] = Some(self.constant(Matrix::scalar(1.0)));
        for i in (0..end).rev() {
            let Some(g) = adj[i] else { continue };
            if !live[i] {
                continue;
            }
            let out = Var(i);
            let op = self.nodes[i].op;
            self.propagate(op, out, g, &live, &mut adj);
        }

        wrt.iter()
            .map(|w| adj[w.0].ok_or(Error::Detached(w.0)))
            .collect()
    }

    fn propagate(&mut self, op: Op, out: Var, g: Var, live: &[bool], adj: &mut [Option<Var>]) {
        let mut acc = |tape: &mut Tape, target: Var, contrib: Var| {
            adj[target.0] = Some(match adj[target.0] {
                Some(prev) => tape.add(prev, contrib),
                None => contrib,
            });
        };
        let needs = |v: Var| live[v.0];
        match op {
            Op::Var | Op::Const => {}
            Op::Add(a, b) => {
                if needs(a) {
                    acc(self, a, g);
                }
                if needs(b) {
                    acc(self, b, g);
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    acc(self, a, g);
                }
                if needs(b) {
                    let c = self.neg(g);
                    acc(self, b, c);
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let c = self.mul(g, b);
                    acc(self, a, c);
                }
                if needs(b) {
                    let c = self.mul(g, a);
                    acc(self, b, c);
                }
            }
            Op::Div(a, b) => {
                if needs(a) {
                    let c = self.div(g, b);
                    acc(self, a, c);
                }
                if needs(b) {
                    let t = self.mul(g, out);
                    let t = self.div(t, b);
                    let c = self.neg(t);
                    acc(self, b, c);
                }
            }
            Op::Neg(a) => {
                let c = self.neg(g);
                acc(self, a, c);
            }
            Op::Scale(a, k) => {
                let c = self.scale(g, k);
                acc(self, a, c);
            }
            Op::MatMul(a, b) => {
                if needs(a) {
                    let bt = self.transpose(b);
                    let c = self.matmul(g, bt);
                    acc(self, a, c);
                }
                if needs(b) {
                    let at = self.transpose(a);
                    let c = self.matmul(at, g);
                    acc(self, b, c);
                }
            }
            Op::Transpose(a) => {
                let c = self.transpose(g);
                acc(self, a, c);
            }
            Op::AddRow(a, b) => {
                if needs(a) {
                    acc(self, a, g);
                }
                if needs(b) {
                    let c = self.sum_rows(g);
                    acc(self, b, c);
                }
            }
            Op::SumRows(a) => {
                let rows = self.value(a).rows();
                let c = self.broadcast_rows(g, rows);
                acc(self, a, c);
            }
            Op::SumCols(a) => {
                let cols = self.value(a).cols();
                let c = self.broadcast_cols(g, cols);
                acc(self, a, c);
            }
            Op::BroadcastRows(a) => {
                let c = self.sum_rows(g);
                acc(self, a, c);
            }
            Op::BroadcastCols(a) => {
                let c = self.sum_cols(g);
                acc(self, a, c);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(a).shape();
                let c = self.broadcast_scalar(g, r, c);
                acc(self, a, c);
            }
            Op::BroadcastScalar(a) => {
                let c = self.sum(g);
                acc(self, a, c);
            }
            Op::Exp(a) => {
                let c = self.mul(g, out);
                acc(self, a, c);
            }
            Op::Log(a) => {
                let c = self.div(g, a);
                acc(self, a, c);
            }
            Op::LogSoftmax(a) => {
                // g - softmax(a) * rowsum(g)
                let cols = self.value(a).cols();
                let p = self.exp(out);
                let rs = self.sum_cols(g);
                let rs = self.broadcast_cols(rs, cols);
                let t = self.mul(p, rs);
                let c = self.sub(g, t);
                acc(self, a, c);
            }
            Op::Mask(a, id) => {
                let c = self.mask_again(g, id);
                acc(self, a, c);
            }
        }
    }
}

/// Row-wise log-softmax of a plain matrix.
pub fn log_softmax_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for i in 0..z.rows() {
        let row = out.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}
