//! Tape-based reverse-mode differentiation over [`Tensor2D`].
//!
//! A [`Tape`] records every operation of a forward pass; [`Var::backward`]
//! walks the recording in reverse and returns the gradient of a scalar
//! output with respect to every leaf. The gradient contract is checked
//! against central finite differences in the test suites.

use std::cell::RefCell;
use std::ops::Range;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor2D};

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// Negative-side slope, conventionally in (0, 1).
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(s) => {
                if x > T::zero() {
                    x
                } else {
                    T::from_f64(s) * x
                }
            }
            Activation::Identity => x,
        }
    }

    // Subgradient at 0 is 0 for relu, slope for leaky relu.
    fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(s) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::from_f64(s)
                }
            }
            Activation::Identity => T::one(),
        }
    }
}

/// Boolean matrix used to mask softmax rows.
#[derive(Clone, Debug)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Evaluation("mask size mismatch".into()));
        }
        Ok(Mask { rows, cols, data })
    }

    pub fn all_true(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            data: vec![true; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }
}

type BackFn<T> = Box<dyn Fn(&Tensor2D<T>) -> Vec<(usize, Tensor2D<T>)>>;

struct Node<T: Scalar> {
    value: Tensor2D<T>,
    grad_fn: Option<BackFn<T>>,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<T: Scalar> {
    nodes: Rc<RefCell<Vec<Node<T>>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    fn push(&self, value: Tensor2D<T>, grad_fn: Option<BackFn<T>>, requires_grad: bool) -> Var<T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad_fn,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input (parameter).
    pub fn leaf(&self, value: Tensor2D<T>) -> Var<T> {
        self.push(value, None, true)
    }

    /// A non-differentiable input (data, fixed structure matrices).
    pub fn constant(&self, value: Tensor2D<T>) -> Var<T> {
        self.push(value, None, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }
}

/// Handle to a node on a [`Tape`].
pub struct Var<T: Scalar> {
    tape: Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

/// Gradients of one scalar output, keyed by tape node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor2D<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the backward root with respect to `var`. Zero if the
    /// variable did not influence the output.
    pub fn get(&self, var: &Var<T>) -> Tensor2D<T> {
        match self.grads.get(var.id).and_then(|g| g.clone()) {
            Some(g) => g,
            None => {
                let (r, c) = var.shape();
                Tensor2D::zeros(r, c)
            }
        }
    }
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> Tensor2D<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(&self, op: &'static str, value: Tensor2D<T>, grad_fn: BackFn<T>) -> Result<Var<T>> {
        value.check_finite(op)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, rg.then_some(grad_fn), rg))
    }

    fn binary(
        &self,
        other: &Var<T>,
        op: &'static str,
        value: Tensor2D<T>,
        grad_fn: BackFn<T>,
    ) -> Result<Var<T>> {
        debug_assert!(Rc::ptr_eq(&self.tape.nodes, &other.tape.nodes));
        value.check_finite(op)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, rg.then_some(grad_fn), rg))
    }

    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        let a = self.value();
        let b = other.value();
        let out = a.matmul(&b)?;
        let (ia, ib) = (self.id, other.id);
        self.binary(
            other,
            "matmul",
            out,
            Box::new(move |g| {
                let da = g.matmul(&b.transpose()).expect("matmul grad shape");
                let db = a.transpose().matmul(g).expect("matmul grad shape");
                vec![(ia, da), (ib, db)]
            }),
        )
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        let a = self.value();
        let b = other.value();
        let out = a.broadcast_zip(&b, "add", |x, y| x + y)?;
        let (ia, ib) = (self.id, other.id);
        let (sa, sb) = (a.shape(), b.shape());
        self.binary(
            other,
            "add",
            out,
            Box::new(move |g| vec![(ia, g.reduce_to(sa)), (ib, g.reduce_to(sb))]),
        )
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        let a = self.value();
        let b = other.value();
        let out = a.broadcast_zip(&b, "sub", |x, y| x - y)?;
        let (ia, ib) = (self.id, other.id);
        let (sa, sb) = (a.shape(), b.shape());
        self.binary(
            other,
            "sub",
            out,
            Box::new(move |g| {
                vec![
                    (ia, g.reduce_to(sa)),
                    (ib, g.map(|v| -v).reduce_to(sb)),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let a = self.value();
        let b = other.value();
        let out = a.broadcast_zip(&b, "mul", |x, y| x * y)?;
        let (ia, ib) = (self.id, other.id);
        let (sa, sb) = (a.shape(), b.shape());
        self.binary(
            other,
            "mul",
            out,
            Box::new(move |g| {
                let da = g.broadcast_zip(&b, "mul", |x, y| x * y).unwrap().reduce_to(sa);
                let db = g.broadcast_zip(&a, "mul", |x, y| x * y).unwrap().reduce_to(sb);
                vec![(ia, da), (ib, db)]
            }),
        )
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        let a = self.value();
        let b = other.value();
        let out = a.broadcast_zip(&b, "div", |x, y| x / y)?;
        let (ia, ib) = (self.id, other.id);
        let (sa, sb) = (a.shape(), b.shape());
        self.binary(
            other,
            "div",
            out,
            Box::new(move |g| {
                let da = g.broadcast_zip(&b, "div", |x, y| x / y).unwrap().reduce_to(sa);
                let db = g
                    .broadcast_zip(&a, "mul", |x, y| x * y)
                    .unwrap()
                    .broadcast_zip(&b, "div", |x, y| -x / (y * y))
                    .unwrap()
                    .reduce_to(sb);
                vec![(ia, da), (ib, db)]
            }),
        )
    }

    pub fn scale(&self, c: T) -> Result<Var<T>> {
        let out = self.value().map(|v| v * c);
        let id = self.id;
        self.unary(
            "scale",
            out,
            Box::new(move |g| vec![(id, g.map(|v| v * c))]),
        )
    }

    pub fn add_scalar(&self, c: T) -> Result<Var<T>> {
        let out = self.value().map(|v| v + c);
        let id = self.id;
        self.unary("add_scalar", out, Box::new(move |g| vec![(id, g.clone())]))
    }

    pub fn neg(&self) -> Result<Var<T>> {
        self.scale(-T::one())
    }

    pub fn transpose(&self) -> Result<Var<T>> {
        let out = self.value().transpose();
        let id = self.id;
        self.unary(
            "transpose",
            out,
            Box::new(move |g| vec![(id, g.transpose())]),
        )
    }

    pub fn activation(&self, kind: Activation) -> Result<Var<T>> {
        let x = self.value();
        let out = x.map(|v| kind.apply(v));
        let id = self.id;
        self.unary(
            "activation",
            out,
            Box::new(move |g| {
                let dx = g
                    .broadcast_zip(&x, "activation", |gv, xv| gv * kind.derivative(xv))
                    .unwrap();
                vec![(id, dx)]
            }),
        )
    }

    pub fn exp(&self) -> Result<Var<T>> {
        let out = self.value().map(|v| v.exp());
        let id = self.id;
        let y = out.clone();
        self.unary(
            "exp",
            out,
            Box::new(move |g| {
                vec![(id, g.broadcast_zip(&y, "exp", |a, b| a * b).unwrap())]
            }),
        )
    }

    pub fn ln(&self) -> Result<Var<T>> {
        let x = self.value();
        let out = x.map(|v| v.ln());
        let id = self.id;
        self.unary(
            "ln",
            out,
            Box::new(move |g| {
                vec![(id, g.broadcast_zip(&x, "ln", |a, b| a / b).unwrap())]
            }),
        )
    }

    pub fn sqrt(&self) -> Result<Var<T>> {
        let out = self.value().map(|v| v.sqrt());
        let id = self.id;
        let y = out.clone();
        let half = T::from_f64(0.5);
        self.unary(
            "sqrt",
            out,
            Box::new(move |g| {
                vec![(
                    id,
                    g.broadcast_zip(&y, "sqrt", |a, b| a * half / b).unwrap(),
                )]
            }),
        )
    }

    /// Row-stochastic softmax, numerically stabilized by row-max
    /// subtraction. Masked entries come out exactly 0; a fully masked row
    /// is an error.
    pub fn softmax_rows(&self, mask: Option<&Mask>) -> Result<Var<T>> {
        let x = self.value();
        let (rows, cols) = x.shape();
        if let Some(m) = mask {
            if m.shape() != (rows, cols) {
                return Err(Error::Evaluation("softmax mask shape mismatch".into()));
            }
        }
        let mut out = Tensor2D::zeros(rows, cols);
        for r in 0..rows {
            let live = |c: usize| mask.map_or(true, |m| m.get(r, c));
            let mut max = None::<T>;
            for c in 0..cols {
                if live(c) {
                    let v = x.get(r, c);
                    max = Some(max.map_or(v, |m| if v > m { v } else { m }));
                }
            }
            let max = max.ok_or(Error::DegenerateRow { row: r })?;
            let mut sum = T::zero();
            for c in 0..cols {
                if live(c) {
                    let e = (x.get(r, c) - max).exp();
                    out.set(r, c, e);
                    sum = sum + e;
                }
            }
            for c in 0..cols {
                out.set(r, c, out.get(r, c) / sum);
            }
        }
        let id = self.id;
        let y = out.clone();
        self.unary(
            "softmax",
            out,
            Box::new(move |g| {
                let (rows, cols) = y.shape();
                let mut dx = Tensor2D::zeros(rows, cols);
                for r in 0..rows {
                    let mut dot = T::zero();
                    for c in 0..cols {
                        dot = dot + g.get(r, c) * y.get(r, c);
                    }
                    for c in 0..cols {
                        dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                vec![(id, dx)]
            }),
        )
    }

    /// Per-row log(sum(exp(x))), returned as an r x 1 column.
    pub fn logsumexp_rows(&self) -> Result<Var<T>> {
        let x = self.value();
        let (rows, cols) = x.shape();
        let mut out = Tensor2D::zeros(rows, 1);
        let mut soft = Tensor2D::zeros(rows, cols);
        for r in 0..rows {
            let mut max = x.get(r, 0);
            for c in 1..cols {
                if x.get(r, c) > max {
                    max = x.get(r, c);
                }
            }
            let mut sum = T::zero();
            for c in 0..cols {
                let e = (x.get(r, c) - max).exp();
                soft.set(r, c, e);
                sum = sum + e;
            }
            for c in 0..cols {
                soft.set(r, c, soft.get(r, c) / sum);
            }
            out.set(r, 0, max + sum.ln());
        }
        let id = self.id;
        self.unary(
            "logsumexp",
            out,
            Box::new(move |g| {
                let (rows, cols) = soft.shape();
                let mut dx = Tensor2D::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        dx.set(r, c, g.get(r, 0) * soft.get(r, c));
                    }
                }
                vec![(id, dx)]
            }),
        )
    }

    pub fn sum_all(&self) -> Result<Var<T>> {
        let x = self.value();
        let s: T = x.data().iter().copied().sum();
        let id = self.id;
        let shape = x.shape();
        self.unary(
            "sum",
            Tensor2D::new(1, 1, vec![s])?,
            Box::new(move |g| {
                vec![(id, Tensor2D::full(shape.0, shape.1, g.get(0, 0)))]
            }),
        )
    }

    pub fn mean_all(&self) -> Result<Var<T>> {
        let n = T::from_f64(self.value().len() as f64);
        self.sum_all()?.scale(T::one() / n)
    }

    /// Row sums as an r x 1 column.
    pub fn row_sum(&self) -> Result<Var<T>> {
        let x = self.value();
        let (rows, cols) = x.shape();
        let mut out = Tensor2D::zeros(rows, 1);
        for r in 0..rows {
            out.set(r, 0, x.row(r).iter().copied().sum());
        }
        let id = self.id;
        self.unary(
            "row_sum",
            out,
            Box::new(move |g| {
                let mut dx = Tensor2D::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        dx.set(r, c, g.get(r, 0));
                    }
                }
                vec![(id, dx)]
            }),
        )
    }

    pub fn row_mean(&self) -> Result<Var<T>> {
        let c = T::from_f64(self.shape().1 as f64);
        self.row_sum()?.scale(T::one() / c)
    }

    /// Column sums as a 1 x c row.
    pub fn col_sum(&self) -> Result<Var<T>> {
        let x = self.value();
        let (rows, cols) = x.shape();
        let mut out = Tensor2D::zeros(1, cols);
        for r in 0..rows {
            for c in 0..cols {
                out.set(0, c, out.get(0, c) + x.get(r, c));
            }
        }
        let id = self.id;
        self.unary(
            "col_sum",
            out,
            Box::new(move |g| {
                let mut dx = Tensor2D::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        dx.set(r, c, g.get(0, c));
                    }
                }
                vec![(id, dx)]
            }),
        )
    }

    pub fn col_mean(&self) -> Result<Var<T>> {
        let r = T::from_f64(self.shape().0 as f64);
        self.col_sum()?.scale(T::one() / r)
    }

    /// Column-wise max as a 1 x c row; the subgradient flows to the first
    /// argmax of each column.
    pub fn col_max(&self) -> Result<Var<T>> {
        let x = self.value();
        let (rows, cols) = x.shape();
        let mut out = Tensor2D::zeros(1, cols);
        let mut arg = vec![0usize; cols];
        for c in 0..cols {
            let mut best = x.get(0, c);
            for r in 1..rows {
                if x.get(r, c) > best {
                    best = x.get(r, c);
                    arg[c] = r;
                }
            }
            out.set(0, c, best);
        }
        let id = self.id;
        self.unary(
            "col_max",
            out,
            Box::new(move |g| {
                let mut dx = Tensor2D::zeros(rows, cols);
                for c in 0..cols {
                    dx.set(arg[c], c, g.get(0, c));
                }
                vec![(id, dx)]
            }),
        )
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Result<Var<T>> {
        let x = self.value();
        let (rows, cols) = x.shape();
        if range.start >= range.end || range.end > rows {
            return Err(Error::Evaluation(format!(
                "row slice {range:?} out of bounds for {rows} rows"
            )));
        }
        let out = Tensor2D::new(
            range.end - range.start,
            cols,
            x.data()[range.start * cols..range.end * cols].to_vec(),
        )?;
        let id = self.id;
        let start = range.start;
        self.unary(
            "slice_rows",
            out,
            Box::new(move |g| {
                let mut dx = Tensor2D::zeros(rows, cols);
                for r in 0..g.rows() {
                    for c in 0..cols {
                        dx.set(start + r, c, g.get(r, c));
                    }
                }
                vec![(id, dx)]
            }),
        )
    }

    pub fn slice_cols(&self, range: Range<usize>) -> Result<Var<T>> {
        let x = self.value();
        let (rows, cols) = x.shape();
        if range.start >= range.end || range.end > cols {
            return Err(Error::Evaluation(format!(
                "col slice {range:?} out of bounds for {cols} cols"
            )));
        }
        let width = range.end - range.start;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[range.clone()]);
        }
        let out = Tensor2D::new(rows, width, data)?;
        let id = self.id;
        let start = range.start;
        self.unary(
            "slice_cols",
            out,
            Box::new(move |g| {
                let mut dx = Tensor2D::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..width {
                        dx.set(r, start + c, g.get(r, c));
                    }
                }
                vec![(id, dx)]
            }),
        )
    }

    /// One entry per row: out[i, 0] = x[i, indices[i]].
    pub fn gather_cols(&self, indices: &[usize]) -> Result<Var<T>> {
        let x = self.value();
        let (rows, cols) = x.shape();
        if indices.len() != rows {
            return Err(Error::Evaluation("gather index count mismatch".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(Error::Evaluation(format!(
                "gather index {bad} out of range for {cols} columns"
            )));
        }
        let mut out = Tensor2D::zeros(rows, 1);
        for r in 0..rows {
            out.set(r, 0, x.get(r, indices[r]));
        }
        let id = self.id;
        let idx = indices.to_vec();
        self.unary(
            "gather_cols",
            out,
            Box::new(move |g| {
                let mut dx = Tensor2D::zeros(rows, cols);
                for r in 0..rows {
                    dx.set(r, idx[r], g.get(r, 0));
                }
                vec![(id, dx)]
            }),
        )
    }

    /// Runs reverse-mode accumulation from this scalar node.
    pub fn backward(&self) -> Result<Gradients<T>> {
        let (r, c) = self.shape();
        if (r, c) != (1, 1) {
            return Err(Error::NotScalar { rows: r, cols: c });
        }
        let nodes = self.tape.nodes.borrow();
        let mut grads: Vec<Option<Tensor2D<T>>> = vec![None; nodes.len()];
        grads[self.id] = Some(Tensor2D::full(1, 1, T::one()));
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].clone() else { continue };
            if let Some(f) = &nodes[id].grad_fn {
                for (pid, pg) in f(&g) {
                    if !nodes[pid].requires_grad && nodes[pid].grad_fn.is_none() {
                        continue;
                    }
                    match &mut grads[pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Stack variables vertically.
pub fn concat_rows<T: Scalar>(parts: &[Var<T>]) -> Result<Var<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Evaluation("concat_rows of nothing".into()))?;
    let cols = first.shape().1;
    let mut data = Vec::new();
    let mut row_counts = Vec::with_capacity(parts.len());
    for p in parts {
        let v = p.value();
        if v.cols() != cols {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs_rows: first.shape().0,
                lhs_cols: cols,
                rhs_rows: v.rows(),
                rhs_cols: v.cols(),
            });
        }
        row_counts.push(v.rows());
        data.extend_from_slice(v.data());
    }
    let total: usize = row_counts.iter().sum();
    let out = Tensor2D::new(total, cols, data)?;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = parts.iter().any(|p| p.requires_grad());
    let grad_fn: BackFn<T> = Box::new(move |g| {
        let mut outs = Vec::with_capacity(ids.len());
        let mut start = 0;
        for (&pid, &rows) in ids.iter().zip(&row_counts) {
            let mut pg = Tensor2D::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    pg.set(r, c, g.get(start + r, c));
                }
            }
            outs.push((pid, pg));
            start += rows;
        }
        outs
    });
    Ok(first.tape.push(out, rg.then_some(grad_fn), rg))
}

/// Stack variables horizontally.
pub fn concat_cols<T: Scalar>(parts: &[Var<T>]) -> Result<Var<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Evaluation("concat_cols of nothing".into()))?;
    let rows = first.shape().0;
    let values: Vec<Tensor2D<T>> = parts.iter().map(|p| p.value()).collect();
    if values.iter().any(|v| v.rows() != rows) {
        return Err(Error::Evaluation("concat_cols row count mismatch".into()));
    }
    let col_counts: Vec<usize> = values.iter().map(|v| v.cols()).collect();
    let total: usize = col_counts.iter().sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for v in &values {
            data.extend_from_slice(v.row(r));
        }
    }
    let out = Tensor2D::new(rows, total, data)?;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = parts.iter().any(|p| p.requires_grad());
    let grad_fn: BackFn<T> = Box::new(move |g| {
        let mut outs = Vec::with_capacity(ids.len());
        let mut start = 0;
        for (&pid, &cols) in ids.iter().zip(&col_counts) {
            let mut pg = Tensor2D::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    pg.set(r, c, g.get(r, start + c));
                }
            }
            outs.push((pid, pg));
            start += cols;
        }
        outs
    });
    Ok(first.tape.push(out, rg.then_some(grad_fn), rg))
}

/// Pre-norm layer normalization over rows with learned scale and shift.
pub fn layer_norm<T: Scalar>(x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
    let mu = x.row_mean()?;
    let centered = x.sub(&mu)?;
    let var = centered.mul(&centered)?.row_mean()?;
    let std = var.add_scalar(eps)?.sqrt()?;
    centered.div(&std)?.mul(gamma)?.add(beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor2D<f64> {
        Tensor2D::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_of_leaf_grad_is_ones() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let loss = w.sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&w), Tensor2D::full(2, 2, 1.0));
    }

    #[test]
    fn quadratic_grad_is_value() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let loss = w.mul(&w).unwrap().sum_all().unwrap().scale(0.5).unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&w), w.value());
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[vec![1.0, 2.0]]));
        assert!(matches!(w.backward(), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[vec![2.0]]));
        let unused = tape.leaf(t(&[vec![5.0]]));
        let loss = w.mul(&w).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&unused), Tensor2D::zeros(1, 1));
        assert_eq!(grads.get(&w).get(0, 0), 4.0);
    }

    #[test]
    fn softmax_rows_examples() {
        let tape = Tape::new();
        let single = tape.constant(t(&[vec![5.0]]));
        assert_eq!(single.softmax_rows(None).unwrap().value().get(0, 0), 1.0);

        let sym = tape.constant(t(&[vec![0.0, 0.0]]));
        let y = sym.softmax_rows(None).unwrap().value();
        assert_eq!(y.data(), &[0.5, 0.5]);

        // Direct exp/sum oracle for [1,2,3].
        let x = [1.0f64, 2.0, 3.0];
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        let expect: Vec<f64> = x.iter().map(|v| v.exp() / z).collect();
        let v = tape.constant(t(&[x.to_vec()]));
        let y = v.softmax_rows(None).unwrap().value();
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((y.get(0, 0) - 0.0900).abs() < 1e-4);
        assert!((y.get(0, 1) - 0.2447).abs() < 1e-4);
        assert!((y.get(0, 2) - 0.6652).abs() < 1e-4);
    }

    #[test]
    fn softmax_shift_invariance_and_row_sum() {
        let tape = Tape::new();
        let x = tape.constant(t(&[vec![0.3, -1.2, 4.0], vec![100.0, 100.5, 99.0]]));
        let y = x.softmax_rows(None).unwrap().value();
        for r in 0..2 {
            let s: f64 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let shifted = tape.constant(t(&[vec![10.3, 8.8, 14.0], vec![107.0, 107.5, 106.0]]));
        let y2 = shifted.softmax_rows(None).unwrap().value();
        assert!(y.max_abs_diff(&y2) < 1e-12);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(t(&[vec![1.0, 2.0]]));
        let mask = Mask::new(1, 2, vec![false, false]).unwrap();
        assert!(matches!(
            x.softmax_rows(Some(&mask)),
            Err(Error::DegenerateRow { row: 0 })
        ));
    }

    #[test]
    fn masked_entries_are_exactly_zero() {
        let tape = Tape::new();
        let x = tape.constant(t(&[vec![1.0, 2.0, 3.0]]));
        let mask = Mask::new(1, 3, vec![true, false, true]).unwrap();
        let y = x.softmax_rows(Some(&mask)).unwrap().value();
        assert_eq!(y.get(0, 1), 0.0);
        assert!((y.get(0, 0) + y.get(0, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn activation_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[vec![-1.0, 2.0]]));
        assert_eq!(
            x.activation(Activation::Relu).unwrap().value().data(),
            &[0.0, 2.0]
        );
        let y = x.activation(Activation::LeakyRelu(0.2)).unwrap().value();
        assert!((y.get(0, 0) + 0.2).abs() < 1e-12);
        assert_eq!(y.get(0, 1), 2.0);
        assert_eq!(
            x.activation(Activation::Identity).unwrap().value(),
            x.value()
        );
    }

    #[test]
    fn matmul_associativity_on_random_chains() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (m, k, l, n) = (
                rng.gen_range(1..5usize),
                rng.gen_range(1..5usize),
                rng.gen_range(1..5usize),
                rng.gen_range(1..5usize),
            );
            let rand_t = |rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize| {
                Tensor2D::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            };
            let a = rand_t(&mut rng, m, k);
            let b = rand_t(&mut rng, k, l);
            let c = rand_t(&mut rng, l, n);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right) < 1e-6);
        }
    }

    #[test]
    fn accumulation_through_shared_subexpression() {
        // loss = (w + w) . 1  => grad 2
        let tape = Tape::new();
        let w = tape.leaf(t(&[vec![3.0]]));
        let loss = w.add(&w).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&w).get(0, 0), 2.0);
    }

    #[test]
    fn col_max_subgradient_to_first_argmax() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[vec![1.0, 5.0], vec![1.0, 2.0]]));
        let loss = x.col_max().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        // Column 0 ties at 1.0; first row wins.
        assert_eq!(grads.get(&x).data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[vec![1.0, 2.0, 3.0, 4.0]]));
        let g = tape.constant(Tensor2D::full(1, 4, 1.0));
        let b = tape.constant(Tensor2D::zeros(1, 4));
        let y = layer_norm(&x, &g, &b, 1e-9).unwrap().value();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
}
