//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! The op set is closed: exactly what the VAE forward pass and the HiPPO
//! consistency term use. Nodes are appended in evaluation order, so the node
//! list is already a topological order and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! ```
//! use hibbo::linalg::Matrix;
//! use hibbo::tape::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Matrix::scalar(3.0));
//! let y = tape.square(x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumRows(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize, usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`; exactly zero when `v` does not feed the output.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, a: Var, value: Matrix, op: Op) -> Var {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix, op: Op) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.binary(a, b, v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.binary(a, b, v, Op::Add(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row expects a 1 x cols row");
        let mut v = av.clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        self.binary(a, row, v, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.binary(a, b, v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).hadamard(self.value(b));
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.unary(a, v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.unary(a, v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.unary(a, v, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.unary(a, v, Op::Square(a))
    }

    /// Elementwise square root; its derivative at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0).sqrt());
        self.unary(a, v, Op::Sqrt(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.unary(a, v, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    /// `r x c -> r x 1`
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let sums: Vec<f64> = av.row_iter().map(|r| r.iter().sum()).collect();
        let v = Matrix::column(&sums);
        self.unary(a, v, Op::SumRows(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_rows(start, end);
        self.unary(a, v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_cols(start, end);
        self.unary(a, v, Op::SliceCols(a, start, end))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        if output.0 >= n {
            return Err(Error::MalformedTape(format!(
                "output node {} is not on this tape ({n} nodes)",
                output.0
            )));
        }
        if self.value(output).shape() != (1, 1) {
            return Err(Error::MalformedTape(format!(
                "output must be scalar, found {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        grads[output.0] = Some(Matrix::scalar(1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for p in parents(&node.op) {
                if p.0 >= i {
                    return Err(Error::MalformedTape(format!(
                        "node {i} has parent {} out of order",
                        p.0
                    )));
                }
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|nd| nd.value.shape()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, contrib: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot => *slot = Some(contrib),
            }
        };
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(a) {
                    acc(a, g.matmul_t(val(b)));
                }
                if want(b) {
                    acc(b, val(a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a·bᵀ ; da = g·b ; db = gᵀ·a
                if a == b {
                    if want(a) {
                        acc(a, g.matmul(val(a)).add(&g.t_matmul(val(a))));
                    }
                } else {
                    if want(a) {
                        acc(a, g.matmul(val(b)));
                    }
                    if want(b) {
                        acc(b, g.t_matmul(val(a)));
                    }
                }
            }
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(a, g.clone());
                if want(row) {
                    let mut s = vec![0.0; g.cols()];
                    for r in g.row_iter() {
                        for (acc_j, x) in s.iter_mut().zip(r) {
                            *acc_j += x;
                        }
                    }
                    acc(row, Matrix::row_vector(&s));
                }
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                if want(b) {
                    acc(b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    acc(a, g.hadamard(val(b)));
                }
                if want(b) {
                    acc(b, g.hadamard(val(a)));
                }
            }
            Op::Scale(a, s) => acc(a, g.scale(s)),
            Op::AddScalar(a) => acc(a, g.clone()),
            Op::Tanh(a) => acc(a, g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))),
            Op::Exp(a) => acc(a, g.hadamard(&node.value)),
            Op::Log(a) => acc(a, g.zip_map(val(a), |gi, x| gi / x)),
            Op::Square(a) => acc(a, g.zip_map(val(a), |gi, x| 2.0 * gi * x)),
            Op::Sqrt(a) => acc(
                a,
                g.zip_map(&node.value, |gi, y| if y > 0.0 { 0.5 * gi / y } else { 0.0 }),
            ),
            Op::Clamp(a, lo, hi) => acc(a, g.zip_map(val(a), |gi, x| if x >= lo && x <= hi { gi } else { 0.0 })),
            Op::Sum(a) => {
                let (r, c) = val(a).shape();
                acc(a, Matrix::filled(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = val(a).shape();
                acc(a, Matrix::from_fn(r, c, |i, _| g[(i, 0)]));
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(a).shape();
                let mut m = Matrix::zeros(r, c);
                m.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(a, m);
            }
            Op::SliceCols(a, start, end) => {
                let (r, c) = val(a).shape();
                let mut m = Matrix::zeros(r, c);
                for i in 0..r {
                    m.row_mut(i)[start..end].copy_from_slice(g.row(i));
                }
                acc(a, m);
            }
        }
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match *op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            vec![a, b]
        }
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Tanh(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Square(a)
        | Op::Sqrt(a)
        | Op::Clamp(a, _, _)
        | Op::Sum(a)
        | Op::SumRows(a)
        | Op::SliceRows(a, _)
        | Op::SliceCols(a, _, _) => vec![a],
    }
}
