//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] records primitive operations as they execute (define-by-run);
//! [`Tape::backward`] replays them in reverse, accumulating vector-Jacobian
//! products into per-node gradients. Nodes that cannot reach a parameter are
//! skipped entirely, so frozen sub-models participate as constants for free.
//!
//! The op set is intentionally small: dense affine layers plus the
//! elementwise/reduction pieces needed to express Gaussian KL terms,
//! reparameterized sampling, and piecewise-smooth collision costs.

use crate::autodiff::tensor::{affine_forward, relu_forward, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a specific tape. Indices are only meaningful for the
/// tape that produced them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    /// Elementwise `if cond != 0 { a } else { b }`; `cond` is a constant mask.
    Select { cond: usize, a: usize, b: usize },
    /// `x * w^T + b` with bias broadcast over rows.
    Affine { x: usize, w: usize, b: usize },
    /// `out[r, j] = x[r, idx[j]]`.
    GatherCols { x: usize, idx: Box<[usize]> },
    ConcatCols(usize, usize),
    /// Each input row repeated `times` times consecutively.
    RepeatEachRow { x: usize, times: usize },
    SumAll(usize),
    SumRows(usize),
    Reshape(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of the given shape if it never received one.
    pub fn take_or_zeros(&mut self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that does not require gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Records a leaf that accumulates gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op: op_name,
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a.0, b.0), value, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a.0, b.0), value, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a.0, b.0), value, needs))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Div(a.0, b.0), value, needs))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let needs = self.needs(a);
        self.push(Op::AddScalar(a.0), value, needs)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let needs = self.needs(a);
        self.push(Op::MulScalar(a.0, s), value, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = relu_forward(self.value(a));
        let needs = self.needs(a);
        self.push(Op::Relu(a.0), value, needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let needs = self.needs(a);
        self.push(Op::Exp(a.0), value, needs)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let needs = self.needs(a);
        self.push(Op::Ln(a.0), value, needs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        let needs = self.needs(a);
        self.push(Op::Sqrt(a.0), value, needs)
    }

    /// Elementwise clamp; gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let needs = self.needs(a);
        self.push(Op::Clamp { x: a.0, lo, hi }, value, needs)
    }

    /// Elementwise branch on a constant 0/1 mask.
    pub fn select(&mut self, cond: Var, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("select", a, b)?;
        if self.value(cond).shape() != self.value(a).shape() {
            return Err(Error::Dimension {
                op: "select",
                detail: format!(
                    "mask {:?} vs operands {:?}",
                    self.value(cond).shape(),
                    self.value(a).shape()
                ),
            });
        }
        let mut value = self.value(b).clone();
        for (o, (&m, &x)) in value
            .data_mut()
            .iter_mut()
            .zip(self.value(cond).data().iter().zip(self.value(a).data()))
        {
            if m != 0.0 {
                *o = x;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Select { cond: cond.0, a: a.0, b: b.0 }, value, needs))
    }

    /// Dense layer `x * w^T + b`; `w` is [out, in], `b` is [1, out].
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = affine_forward(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Affine { x: x.0, w: w.0, b: b.0 }, value, needs))
    }

    /// Column gather: output column `j` is input column `idx[j]`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&c| c >= src.cols()) {
            return Err(Error::Dimension {
                op: "gather_cols",
                detail: format!("column {bad} out of bounds for width {}", src.cols()),
            });
        }
        let mut value = Tensor::zeros(src.rows(), idx.len());
        for r in 0..src.rows() {
            let src_row = src.row(r);
            let dst_row = value.row_mut(r);
            for (j, &c) in idx.iter().enumerate() {
                dst_row[j] = src_row[c];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::GatherCols { x: a.0, idx: idx.into() }, value, needs))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::Dimension {
                op: "concat_cols",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut value = Tensor::zeros(ta.rows(), ta.cols() + tb.cols());
        for r in 0..ta.rows() {
            let (left, right) = value.row_mut(r).split_at_mut(ta.cols());
            left.copy_from_slice(ta.row(r));
            right.copy_from_slice(tb.row(r));
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatCols(a.0, b.0), value, needs))
    }

    /// Repeats every row `times` times consecutively: [n, d] -> [n*times, d].
    pub fn repeat_each_row(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::Usage("repeat_each_row requires times >= 1".into()));
        }
        let src = self.value(a);
        let mut value = Tensor::zeros(src.rows() * times, src.cols());
        for r in 0..src.rows() {
            for t in 0..times {
                value.row_mut(r * times + t).copy_from_slice(src.row(r));
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::RepeatEachRow { x: a.0, times }, value, needs))
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Op::SumAll(a.0), Tensor::scalar(total), needs)
    }

    /// Row sums: [n, d] -> [n, 1].
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Tensor::zeros(src.rows(), 1);
        for r in 0..src.rows() {
            value.set(r, 0, src.row(r).iter().sum());
        }
        let needs = self.needs(a);
        self.push(Op::SumRows(a.0), value, needs)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).reshaped(rows, cols)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape(a.0), value, needs))
    }

    /// Mean of all entries as a 1x1 tensor.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Reverse sweep from `root`, which must be 1x1.
    ///
    /// Returns one gradient tensor per node that both requires gradients and
    /// is reachable from `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "backward root {} out of bounds for tape of {} nodes",
                root.0,
                self.nodes.len()
            )));
        }
        if self.value(root).shape() != (1, 1) {
            return Err(Error::Dimension {
                op: "backward",
                detail: format!("root must be 1x1, got {:?}", self.value(root).shape()),
            });
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(Tensor::scalar(1.0));
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_inputs(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        Ok(Gradients { grads })
    }

    fn accumulate_inputs(
        &self,
        node_idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let add_to = |grads: &mut [Option<Tensor>], target: usize, delta: Tensor| -> Result<()> {
            match &mut grads[target] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        // Skips inputs that cannot reach a parameter; their gradients are
        // never materialized.
        let live = |idx: usize| self.nodes[idx].needs_grad;

        match &self.nodes[node_idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if live(*a) {
                    add_to(grads, *a, g.clone())?;
                }
                if live(*b) {
                    add_to(grads, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if live(*a) {
                    add_to(grads, *a, g.clone())?;
                }
                if live(*b) {
                    add_to(grads, *b, g.map(|v| -v))?;
                }
            }
            Op::Mul(a, b) => {
                if live(*a) {
                    add_to(grads, *a, zip_map(g, &self.nodes[*b].value, |gv, bv| gv * bv))?;
                }
                if live(*b) {
                    add_to(grads, *b, zip_map(g, &self.nodes[*a].value, |gv, av| gv * av))?;
                }
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[*b].value;
                if live(*a) {
                    add_to(grads, *a, zip_map(g, bv, |gv, b| gv / b))?;
                }
                if live(*b) {
                    let av = &self.nodes[*a].value;
                    let mut delta = zip_map(g, av, |gv, a| gv * a);
                    for (d, &b) in delta.data_mut().iter_mut().zip(bv.data()) {
                        *d = -*d / (b * b);
                    }
                    add_to(grads, *b, delta)?;
                }
            }
            Op::AddScalar(a) => {
                if live(*a) {
                    add_to(grads, *a, g.clone())?;
                }
            }
            Op::MulScalar(a, s) => {
                if live(*a) {
                    let s = *s;
                    add_to(grads, *a, g.map(|v| v * s))?;
                }
            }
            Op::Relu(a) => {
                if live(*a) {
                    let delta = zip_map(g, &self.nodes[*a].value, |gv, x| {
                        if x > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    });
                    add_to(grads, *a, delta)?;
                }
            }
            Op::Exp(a) => {
                if live(*a) {
                    add_to(grads, *a, zip_map(g, &self.nodes[node_idx].value, |gv, e| gv * e))?;
                }
            }
            Op::Ln(a) => {
                if live(*a) {
                    add_to(grads, *a, zip_map(g, &self.nodes[*a].value, |gv, x| gv / x))?;
                }
            }
            Op::Sqrt(a) => {
                if live(*a) {
                    // Zero upstream gradient contributes zero even where the
                    // local derivative blows up (sqrt at 0 behind a clamp).
                    let delta = zip_map(g, &self.nodes[node_idx].value, |gv, s| {
                        if gv == 0.0 || s == 0.0 {
                            0.0
                        } else {
                            gv * 0.5 / s
                        }
                    });
                    add_to(grads, *a, delta)?;
                }
            }
            Op::Clamp { x, lo, hi } => {
                if live(*x) {
                    let (lo, hi) = (*lo, *hi);
                    let delta = zip_map(g, &self.nodes[*x].value, |gv, v| {
                        if v > lo && v < hi {
                            gv
                        } else {
                            0.0
                        }
                    });
                    add_to(grads, *x, delta)?;
                }
            }
            Op::Select { cond, a, b } => {
                let mask = &self.nodes[*cond].value;
                if live(*a) {
                    add_to(grads, *a, zip_map(g, mask, |gv, m| if m != 0.0 { gv } else { 0.0 }))?;
                }
                if live(*b) {
                    add_to(grads, *b, zip_map(g, mask, |gv, m| if m != 0.0 { 0.0 } else { gv }))?;
                }
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                if live(*x) {
                    add_to(grads, *x, g.matmul_nn(wv)?)?;
                }
                if live(*w) {
                    add_to(grads, *w, g.matmul_tn(xv)?)?;
                }
                if live(*b) {
                    add_to(grads, *b, g.col_sums())?;
                }
            }
            Op::GatherCols { x, idx } => {
                if live(*x) {
                    let src = &self.nodes[*x].value;
                    let mut delta = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        let g_row = g.row(r);
                        let d_row = delta.row_mut(r);
                        for (j, &c) in idx.iter().enumerate() {
                            d_row[c] += g_row[j];
                        }
                    }
                    add_to(grads, *x, delta)?;
                }
            }
            Op::ConcatCols(a, b) => {
                let a_cols = self.nodes[*a].value.cols();
                if live(*a) {
                    let mut delta = Tensor::zeros(g.rows(), a_cols);
                    for r in 0..g.rows() {
                        delta.row_mut(r).copy_from_slice(&g.row(r)[..a_cols]);
                    }
                    add_to(grads, *a, delta)?;
                }
                if live(*b) {
                    let b_cols = g.cols() - a_cols;
                    let mut delta = Tensor::zeros(g.rows(), b_cols);
                    for r in 0..g.rows() {
                        delta.row_mut(r).copy_from_slice(&g.row(r)[a_cols..]);
                    }
                    add_to(grads, *b, delta)?;
                }
            }
            Op::RepeatEachRow { x, times } => {
                if live(*x) {
                    let src = &self.nodes[*x].value;
                    let mut delta = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        for t in 0..*times {
                            let g_row = g.row(r * times + t);
                            for (d, &gv) in delta.row_mut(r).iter_mut().zip(g_row) {
                                *d += gv;
                            }
                        }
                    }
                    add_to(grads, *x, delta)?;
                }
            }
            Op::SumAll(a) => {
                if live(*a) {
                    let src = &self.nodes[*a].value;
                    let gv = g.get(0, 0);
                    add_to(grads, *a, Tensor::filled(src.rows(), src.cols(), gv))?;
                }
            }
            Op::SumRows(a) => {
                if live(*a) {
                    let src = &self.nodes[*a].value;
                    let mut delta = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        let gv = g.get(r, 0);
                        for d in delta.row_mut(r) {
                            *d = gv;
                        }
                    }
                    add_to(grads, *a, delta)?;
                }
            }
            Op::Reshape(a) => {
                if live(*a) {
                    let src = &self.nodes[*a].value;
                    add_to(grads, *a, g.reshaped(src.rows(), src.cols())?)?;
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o = f(*o, bv);
    }
    out
}

/// Convenience: builds a mask tensor from a predicate over an existing value.
pub fn mask_from(t: &Tensor, pred: impl Fn(f64) -> bool) -> Tensor {
    t.map(|v| if pred(v) { 1.0 } else { 0.0 })
}
