//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Operations are recorded in forward order into an append-only node list;
//! `backward` replays them in reverse (which is reverse topological order by
//! construction) and accumulates vector-Jacobian products into per-parameter
//! gradient buffers. Tapes borrow the parameter bank read-only; embedding rows
//! enter through `gather` nodes whose backward scatter-adds into the table
//! gradient.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg;
use crate::params::{Gradients, ParamBank, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    /// External constant; receives no gradient.
    Input,
    /// Whole parameter tensor.
    Param(ParamId),
    /// One row of a 2-D parameter table.
    Gather { pid: ParamId, row: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    /// w: [rows, cols] times x: [cols] -> [rows].
    MatVec { w: Var, x: Var },
    Dot(Var, Var),
    Concat(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    /// ln sigmoid(x), numerically stable.
    LogSigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    /// Select element `i` of a vector as a scalar.
    Index(Var, usize),
    /// Elementwise sum of same-shaped nodes.
    SumStack(Vec<Var>),
    /// Pack scalar nodes into one vector.
    StackScalars(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Single-threaded tape builder over a read-only parameter bank.
pub struct Tape<'b, T: Scalar> {
    bank: &'b ParamBank<T>,
    nodes: Vec<Node<T>>,
    param_cache: HashMap<ParamId, Var>,
    gather_cache: HashMap<(ParamId, usize), Var>,
}

impl<'b, T: Scalar> Tape<'b, T> {
    pub fn new(bank: &'b ParamBank<T>) -> Self {
        Tape {
            bank,
            nodes: Vec::new(),
            param_cache: HashMap::new(),
            gather_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Register an external constant. NaN/Inf rejected at this boundary.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        value.ensure_finite("tape input")?;
        Ok(self.push(value, Op::Input))
    }

    pub fn constant(&mut self, x: f64) -> Result<Var> {
        self.input(Tensor::scalar(T::of(x)))
    }

    /// Bring a whole parameter tensor onto the tape (cached per tape).
    pub fn param(&mut self, pid: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&pid) {
            return v;
        }
        let value = self.bank.value(pid).clone();
        let v = self.push(value, Op::Param(pid));
        self.param_cache.insert(pid, v);
        v
    }

    /// Look up row `row` of a [rows, cols] parameter table (cached per tape).
    pub fn gather(&mut self, pid: ParamId, row: usize) -> Result<Var> {
        if let Some(&v) = self.gather_cache.get(&(pid, row)) {
            return Ok(v);
        }
        let table = self.bank.value(pid);
        let shape = table.shape();
        if shape.len() != 2 || row >= shape[0] {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: shape.to_vec(),
                rhs: vec![row],
            });
        }
        let cols = shape[1];
        let data = table.data()[row * cols..(row + 1) * cols].to_vec();
        let v = self.push(Tensor::vector(data), Op::Gather { pid, row });
        self.gather_cache.insert((pid, row), v);
        Ok(v)
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), data).expect("same-shape result")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let value = self.like(a, linalg::add(self.value(a).data(), self.value(b).data()));
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let value = self.like(a, linalg::sub(self.value(a).data(), self.value(b).data()));
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let value = self.like(a, linalg::mul(self.value(a).data(), self.value(b).data()));
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.like(a, self.value(a).data().iter().map(|x| -*x).collect());
        self.push(value, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.like(a, linalg::scale(self.value(a).data(), c));
        self.push(value, Op::Scale(a, c))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: ws,
                rhs: xs,
            });
        }
        let value = Tensor::vector(linalg::matvec(
            self.value(w).data(),
            ws[0],
            ws[1],
            self.value(x).data(),
        ));
        Ok(self.push(value, Op::MatVec { w, x }))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("dot", a, b)?;
        let value = Tensor::scalar(linalg::dot(self.value(a).data(), self.value(b).data()));
        Ok(self.push(value, Op::Dot(a, b)))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        self.push(Tensor::vector(data), Op::Concat(a, b))
    }

    // ── Activations ──────────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.like(a, linalg::sigmoid_vec(self.value(a).data()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.like(a, linalg::tanh_vec(self.value(a).data()));
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.like(a, linalg::relu_vec(self.value(a).data()));
        self.push(value, Op::Relu(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.like(
            a,
            self.value(a)
                .data()
                .iter()
                .map(|x| linalg::log_sigmoid(*x))
                .collect(),
        );
        self.push(value, Op::LogSigmoid(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = self.like(a, linalg::softmax(self.value(a).data()));
        self.push(value, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = self.like(a, linalg::log_softmax(self.value(a).data()));
        self.push(value, Op::LogSoftmax(a))
    }

    // ── Structure ────────────────────────────────────────────────────

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        if i >= self.value(a).numel() {
            return Err(Error::ShapeMismatch {
                op: "index",
                lhs: self.shape(a).to_vec(),
                rhs: vec![i],
            });
        }
        let value = Tensor::scalar(self.value(a).data()[i]);
        Ok(self.push(value, Op::Index(a, i)))
    }

    /// Elementwise sum of one or more same-shaped nodes.
    pub fn sum_stack(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or(Error::ShapeMismatch {
            op: "sum_stack",
            lhs: vec![],
            rhs: vec![],
        })?;
        let mut data = self.value(first).data().to_vec();
        for v in &vars[1..] {
            self.binary_same_shape("sum_stack", first, *v)?;
            for (d, s) in data.iter_mut().zip(self.value(*v).data()) {
                *d += *s;
            }
        }
        let value = self.like(first, data);
        Ok(self.push(value, Op::SumStack(vars.to_vec())))
    }

    /// Arithmetic mean of one or more same-shaped nodes.
    pub fn mean_stack(&mut self, vars: &[Var]) -> Result<Var> {
        let sum = self.sum_stack(vars)?;
        Ok(self.scale(sum, T::of(1.0 / vars.len() as f64)))
    }

    /// Pack scalar nodes into one vector.
    pub fn stack_scalars(&mut self, vars: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(vars.len());
        for v in vars {
            if self.value(*v).numel() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "stack_scalars",
                    lhs: self.shape(*v).to_vec(),
                    rhs: vec![1],
                });
            }
            data.push(self.value(*v).item());
        }
        Ok(self.push(Tensor::vector(data), Op::StackScalars(vars.to_vec())))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output. Returns dense gradients over every
    /// bank parameter; parameters the output does not depend on keep zeros.
    /// Repeated calls over the same tape are bit-identical.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).numel() != 1 {
            return Err(Error::NonScalarOutput {
                shape: self.shape(out).to_vec(),
            });
        }
        self.value(out).ensure_finite("backward output")?;

        let mut node_grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        node_grads[out.0] = Some(vec![T::one()]);
        let mut grads = Gradients::zeros(self.bank);

        for idx in (0..=out.0).rev() {
            let Some(g) = node_grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut node_grads, &mut grads);
        }
        Ok(grads)
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &[T],
        node_grads: &mut [Option<Vec<T>>],
        grads: &mut Gradients<T>,
    ) {
        let node = &self.nodes[idx];
        let acc = |node_grads: &mut [Option<Vec<T>>], v: Var, contrib: &[T]| {
            let slot = &mut node_grads[v.0];
            match slot {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += *c;
                    }
                }
                None => *slot = Some(contrib.to_vec()),
            }
        };

        match &node.op {
            Op::Input => {}
            Op::Param(pid) => {
                let dst = grads.row_mut(*pid);
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += *s;
                }
            }
            Op::Gather { pid, row } => {
                let cols = node.value.numel();
                let dst = &mut grads.row_mut(*pid)[row * cols..(row + 1) * cols];
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += *s;
                }
            }
            Op::Add(a, b) => {
                acc(node_grads, *a, g);
                acc(node_grads, *b, g);
            }
            Op::Sub(a, b) => {
                acc(node_grads, *a, g);
                let neg: Vec<T> = g.iter().map(|x| -*x).collect();
                acc(node_grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da = linalg::mul(g, self.value(*b).data());
                let db = linalg::mul(g, self.value(*a).data());
                acc(node_grads, *a, &da);
                acc(node_grads, *b, &db);
            }
            Op::Neg(a) => {
                let da: Vec<T> = g.iter().map(|x| -*x).collect();
                acc(node_grads, *a, &da);
            }
            Op::Scale(a, c) => {
                let da = linalg::scale(g, *c);
                acc(node_grads, *a, &da);
            }
            Op::MatVec { w, x } => {
                let rows = self.shape(*w)[0];
                let cols = self.shape(*w)[1];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                // dW[r, c] = g[r] * x[c]
                let mut dw = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dw[r * cols + c] = g[r] * xv[c];
                    }
                }
                // dx[c] = sum_r g[r] * W[r, c]
                let mut dx = vec![T::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[c] += g[r] * wv[r * cols + c];
                    }
                }
                acc(node_grads, *w, &dw);
                acc(node_grads, *x, &dx);
            }
            Op::Dot(a, b) => {
                let da = linalg::scale(self.value(*b).data(), g[0]);
                let db = linalg::scale(self.value(*a).data(), g[0]);
                acc(node_grads, *a, &da);
                acc(node_grads, *b, &db);
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).numel();
                acc(node_grads, *a, &g[..na]);
                acc(node_grads, *b, &g[na..]);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let da: Vec<T> = g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| *gi * *yi * (T::one() - *yi))
                    .collect();
                acc(node_grads, *a, &da);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let da: Vec<T> = g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| *gi * (T::one() - *yi * *yi))
                    .collect();
                acc(node_grads, *a, &da);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let da: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, xi)| if *xi > T::zero() { *gi } else { T::zero() })
                    .collect();
                acc(node_grads, *a, &da);
            }
            Op::LogSigmoid(a) => {
                // d/dx ln sigmoid(x) = 1 - sigmoid(x) = 1 - e^y for y = ln sigmoid(x).
                let y = node.value.data();
                let da: Vec<T> = g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| *gi * (T::one() - yi.exp()))
                    .collect();
                acc(node_grads, *a, &da);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let inner: T = g.iter().zip(y).map(|(gi, yi)| *gi * *yi).sum();
                let da: Vec<T> = g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| *yi * (*gi - inner))
                    .collect();
                acc(node_grads, *a, &da);
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let gsum: T = g.iter().cloned().sum();
                let da: Vec<T> = g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| *gi - gsum * yi.exp())
                    .collect();
                acc(node_grads, *a, &da);
            }
            Op::Index(a, i) => {
                let mut da = vec![T::zero(); self.value(*a).numel()];
                da[*i] = g[0];
                acc(node_grads, *a, &da);
            }
            Op::SumStack(vars) => {
                for v in vars {
                    acc(node_grads, *v, g);
                }
            }
            Op::StackScalars(vars) => {
                for (i, v) in vars.iter().enumerate() {
                    acc(node_grads, *v, &[g[i]]);
                }
            }
        }
    }
}
