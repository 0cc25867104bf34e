//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse insertion
//! order, which is a reverse topological order because a node can only refer
//! to nodes recorded before it, and visits each node exactly once.
//!
//! Shape errors inside the tape are programmer errors and panic; the public
//! layer functions validate user-facing shapes before recording anything.

use std::collections::BTreeMap;

use super::params::{Gradients, ModelParams};
use super::tensor::{gemm, gemm_raw, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    SliceCols { input: Var, start: usize },
    GatherRows { input: Var, rows: Vec<usize> },
    Reshape(Var),
    BlockLeftMul { left: Var, input: Var },
    MaskMul { input: Var, mask: Tensor },
    Mse { pred: Var, target: Tensor },
    Bce { pred: Var, target: Tensor, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records (once per tape) the named parameter as a differentiable leaf.
    pub fn param(&mut self, params: &ModelParams, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = params
            .value(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = self.push(value, Op::Param(name.to_string()), true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul {ar}x{ac} by {br}x{bc}");
        let mut out = Tensor::zeros(ar, bc);
        gemm(self.value(a), false, self.value(b), false, &mut out, 0.0);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// Adds the `1 × c` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(bias), (1, c), "add_row bias shape");
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..r {
            for (o, bv) in out.row_mut(i).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddRow(x, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            let c = t.cols();
            for r in 0..rows {
                out.row_mut(r)[offset..offset + c].copy_from_slice(t.row(r));
            }
            offset += c;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols out of range");
        let src = self.value(a);
        let mut out = Tensor::zeros(r, len);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&src.row(i)[start..start + len]);
        }
        let ng = self.needs(a);
        self.push(out, Op::SliceCols { input: a, start }, ng)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let src = self.value(a);
        let c = src.cols();
        let mut out = Tensor::zeros(rows.len(), c);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(src.row(r));
        }
        let ng = self.needs(a);
        self.push(
            out,
            Op::GatherRows {
                input: a,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        let ng = self.needs(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Multiplies every `n × f` row block of `input` on the left by the
    /// constant `n × n` matrix `left`.
    pub fn block_left_mul(&mut self, left: Var, input: Var) -> Var {
        assert!(!self.needs(left), "block_left_mul left operand must be constant");
        let (n, n2) = self.shape(left);
        assert_eq!(n, n2, "block_left_mul needs a square left operand");
        let (r, f) = self.shape(input);
        assert!(n > 0 && r % n == 0, "block_left_mul: {r} rows not a multiple of {n}");
        let mut out = Tensor::zeros(r, f);
        {
            let l = self.value(left).data();
            let x = self.value(input).data();
            let o = out.data_mut();
            for blk in 0..r / n {
                let s = blk * n * f;
                gemm_raw(n, n, f, l, n, false, &x[s..], f, false, &mut o[s..s + n * f], 0.0);
            }
        }
        let ng = self.needs(input);
        self.push(out, Op::BlockLeftMul { left, input }, ng)
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(&mut self, a: Var, mask: Tensor) -> Var {
        let out = self.value(a).zip_map(&mask, |x, m| x * m);
        let ng = self.needs(a);
        self.push(out, Op::MaskMul { input: a, mask }, ng)
    }

    /// Mean squared error against a constant target, as a `1 × 1` node.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "mse shape mismatch");
        let n = p.len().max(1) as f64;
        let loss: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let ng = self.needs(pred);
        self.push(Tensor::scalar(loss), Op::Mse { pred, target }, ng)
    }

    /// Mean binary cross entropy of probabilities clamped to `[eps, 1 − eps]`.
    pub fn bce(&mut self, pred: Var, target: Tensor, eps: f64) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "bce shape mismatch");
        let loss = super::loss::bce_loss_raw(p.data(), target.data(), eps);
        let ng = self.needs(pred);
        self.push(Tensor::scalar(loss), Op::Bce { pred, target, eps }, ng)
    }

    /// Reverse pass from the scalar `loss`; returns gradients of every
    /// parameter recorded on the tape.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => out.accumulate(name, g),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let mut da = Tensor::zeros(self.shape(*a).0, self.shape(*a).1);
                        gemm(&g, false, self.value(*b), true, &mut da, 0.0);
                        acc(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = Tensor::zeros(self.shape(*b).0, self.shape(*b).1);
                        gemm(self.value(*a), true, &g, false, &mut db, 0.0);
                        acc(&mut grads, *b, db);
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.needs(*bias) {
                        let mut db = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        acc(&mut grads, *bias, db);
                    }
                    if self.needs(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        acc(&mut grads, *b, g.map(|x| -x));
                    }
                    if self.needs(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.zip_map(self.value(*b), |d, y| d * y));
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, g.zip_map(self.value(*a), |d, x| d * x));
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|d| d * s));
                }
                Op::Relu(a) => {
                    let d = g.zip_map(&node.value, |d, y| if y > 0.0 { d } else { 0.0 });
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |d, y| d * y * (1.0 - y));
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |d, y| d * (1.0 - y * y));
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        if self.needs(p) {
                            let mut d = Tensor::zeros(r, c);
                            for row in 0..r {
                                d.row_mut(row).copy_from_slice(&g.row(row)[offset..offset + c]);
                            }
                            acc(&mut grads, p, d);
                        }
                        offset += c;
                    }
                }
                Op::SliceCols { input, start } => {
                    let (r, c) = self.shape(*input);
                    let len = g.cols();
                    let mut d = Tensor::zeros(r, c);
                    for row in 0..r {
                        d.row_mut(row)[*start..*start + len].copy_from_slice(g.row(row));
                    }
                    acc(&mut grads, *input, d);
                }
                Op::GatherRows { input, rows } => {
                    let (r, c) = self.shape(*input);
                    let mut d = Tensor::zeros(r, c);
                    for (i, &src) in rows.iter().enumerate() {
                        for (dv, gv) in d.row_mut(src).iter_mut().zip(g.row(i)) {
                            *dv += gv;
                        }
                    }
                    acc(&mut grads, *input, d);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, g.reshaped(r, c));
                }
                Op::BlockLeftMul { left, input } => {
                    let (n, _) = self.shape(*left);
                    let (r, f) = self.shape(*input);
                    let mut d = Tensor::zeros(r, f);
                    {
                        let l = self.value(*left).data();
                        let gd = g.data();
                        let dd = d.data_mut();
                        for blk in 0..r / n {
                            let s = blk * n * f;
                            gemm_raw(n, n, f, l, n, true, &gd[s..], f, false, &mut dd[s..s + n * f], 0.0);
                        }
                    }
                    acc(&mut grads, *input, d);
                }
                Op::MaskMul { input, mask } => {
                    acc(&mut grads, *input, g.zip_map(mask, |d, m| d * m));
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let scale = 2.0 * g.get(0, 0) / p.len().max(1) as f64;
                    acc(&mut grads, *pred, p.zip_map(target, |a, b| scale * (a - b)));
                }
                Op::Bce { pred, target, eps } => {
                    let p = self.value(*pred);
                    let scale = g.get(0, 0) / p.len().max(1) as f64;
                    let eps = *eps;
                    let d = p.zip_map(target, |p, y| {
                        if p <= eps || p >= 1.0 - eps {
                            0.0
                        } else {
                            scale * (p - y) / (p * (1.0 - p))
                        }
                    });
                    acc(&mut grads, *pred, d);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}
