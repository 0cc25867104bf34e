//! Layers assembled from tape operations.
//!
//! Each layer has a tape form used while training and a plain `*_forward`
//! form that runs the same code on a throwaway tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

pub fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => x,
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Tanh => tape.tanh(x),
    }
}

/// `act(x · w + b)`.
pub fn dense(tape: &mut Tape, x: Var, w: Var, b: Var, act: Activation) -> Var {
    let xw = tape.matmul(x, w);
    let z = tape.add_row(xw, b);
    activate(tape, z, act)
}

/// Dense layer using parameters `{prefix}.w` and `{prefix}.b`.
pub fn dense_named(tape: &mut Tape, params: &ModelParams, prefix: &str, x: Var, act: Activation) -> Var {
    let w = tape.param(params, &format!("{prefix}.w"));
    let b = tape.param(params, &format!("{prefix}.b"));
    dense(tape, x, w, b, act)
}

pub fn init_dense(params: &mut ModelParams, prefix: &str, fan_in: usize, fan_out: usize, seed: u64) {
    params.insert_glorot(&format!("{prefix}.w"), fan_in, fan_out, seed);
    params.insert_zeros(&format!("{prefix}.b"), 1, fan_out);
}

/// Graph convolution `act(P · X · Θ)` applied to every `n`-row block of `x`,
/// where `propagation` is the constant `n × n` matrix P.
///
/// The cheaper association order is picked per call: when Θ shrinks the
/// width, `X · Θ` runs first.
pub fn gcn(tape: &mut Tape, propagation: Var, x: Var, theta: Var, act: Activation) -> Var {
    let (_, c) = tape.shape(x);
    let (_, f) = tape.shape(theta);
    let z = if f <= c {
        let xt = tape.matmul(x, theta);
        tape.block_left_mul(propagation, xt)
    } else {
        let px = tape.block_left_mul(propagation, x);
        tape.matmul(px, theta)
    };
    activate(tape, z, act)
}

/// Inverted dropout: survivors are scaled by `1 / keep_prob`. Identity in
/// eval mode or when `keep_prob == 1`.
pub fn dropout(tape: &mut Tape, x: Var, keep_prob: f64, mode: Mode, rng: &mut impl Rng) -> Var {
    if mode == Mode::Eval || keep_prob >= 1.0 {
        return x;
    }
    let (r, c) = tape.shape(x);
    let scale = 1.0 / keep_prob;
    let data = (0..r * c)
        .map(|_| if rng.random::<f64>() < keep_prob { scale } else { 0.0 })
        .collect();
    tape.mask_mul(x, Tensor::from_vec(r, c, data).expect("sized"))
}

/// LSTM parameters: `{prefix}.w_x` (in × 4h), `{prefix}.w_h` (h × 4h),
/// `{prefix}.b` (1 × 4h); gate column blocks are ordered input, forget,
/// candidate, output.
pub fn init_lstm(params: &mut ModelParams, prefix: &str, input: usize, hidden: usize, seed: u64) {
    params.insert_glorot(&format!("{prefix}.w_x"), input, 4 * hidden, seed);
    params.insert_glorot(&format!("{prefix}.w_h"), hidden, 4 * hidden, seed);
    params.insert_zeros(&format!("{prefix}.b"), 1, 4 * hidden);
}

/// One LSTM step given the already projected input `x_t · W_x + b`.
fn lstm_cell(tape: &mut Tape, x_proj: Var, h_prev: Var, c_prev: Var, w_h: Var, hidden: usize) -> (Var, Var) {
    let hh = tape.matmul(h_prev, w_h);
    let gates = tape.add(x_proj, hh);
    let i = tape.slice_cols(gates, 0, hidden);
    let f = tape.slice_cols(gates, hidden, hidden);
    let g = tape.slice_cols(gates, 2 * hidden, hidden);
    let o = tape.slice_cols(gates, 3 * hidden, hidden);
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c_prev);
    let ig = tape.mul(i, g);
    let c = tape.add(fc, ig);
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc);
    (h, c)
}

/// Single LSTM step on a batch: `x_t` is `B × in`, states are `B × h`.
pub fn lstm_step(tape: &mut Tape, params: &ModelParams, prefix: &str, x_t: Var, h_prev: Var, c_prev: Var) -> (Var, Var) {
    let w_x = tape.param(params, &format!("{prefix}.w_x"));
    let w_h = tape.param(params, &format!("{prefix}.w_h"));
    let b = tape.param(params, &format!("{prefix}.b"));
    let hidden = tape.shape(w_h).0;
    let xw = tape.matmul(x_t, w_x);
    let x_proj = tape.add_row(xw, b);
    lstm_cell(tape, x_proj, h_prev, c_prev, w_h, hidden)
}

/// Runs an LSTM from zero state over sequences stored as rows of `inputs`.
///
/// `steps[j]` lists, for every batch element, the row of `inputs` fed at step
/// `j`. The input projection is computed once for all rows and gathered per
/// step. Returns the final hidden state (`B × h`).
pub fn lstm_over_rows(tape: &mut Tape, params: &ModelParams, prefix: &str, inputs: Var, steps: &[Vec<usize>]) -> Var {
    let w_x = tape.param(params, &format!("{prefix}.w_x"));
    let w_h = tape.param(params, &format!("{prefix}.w_h"));
    let b = tape.param(params, &format!("{prefix}.b"));
    let hidden = tape.shape(w_h).0;
    let batch = steps.first().map_or(0, Vec::len);
    let xw = tape.matmul(inputs, w_x);
    let proj = tape.add_row(xw, b);
    let mut h = tape.constant(Tensor::zeros(batch, hidden));
    let mut c = tape.constant(Tensor::zeros(batch, hidden));
    for rows in steps {
        let x_proj = tape.gather_rows(proj, rows);
        let (nh, nc) = lstm_cell(tape, x_proj, h, c, w_h, hidden);
        h = nh;
        c = nc;
    }
    h
}

/// RNN parameters: `{prefix}.w_x` (in × h), `{prefix}.w_h` (h × h), `{prefix}.b`.
pub fn init_rnn(params: &mut ModelParams, prefix: &str, input: usize, hidden: usize, seed: u64) {
    params.insert_glorot(&format!("{prefix}.w_x"), input, hidden, seed);
    params.insert_glorot(&format!("{prefix}.w_h"), hidden, hidden, seed);
    params.insert_zeros(&format!("{prefix}.b"), 1, hidden);
}

/// `h_t = tanh(x_t W_x + h_prev W_h + b)`.
pub fn rnn_step(tape: &mut Tape, params: &ModelParams, prefix: &str, x_t: Var, h_prev: Var) -> Var {
    let w_x = tape.param(params, &format!("{prefix}.w_x"));
    let w_h = tape.param(params, &format!("{prefix}.w_h"));
    let b = tape.param(params, &format!("{prefix}.b"));
    let xw = tape.matmul(x_t, w_x);
    let hw = tape.matmul(h_prev, w_h);
    let s = tape.add(xw, hw);
    let z = tape.add_row(s, b);
    tape.tanh(z)
}

/// RNN over variable-length sequences, right-aligned so every sequence ends
/// at the last step. `inputs[j]` is the `B × in` input at step `j` and
/// `active[j][b]` says whether batch element `b` has an element there.
/// Inactive steps carry the previous state through unchanged, so an empty
/// sequence yields the zero vector.
pub fn rnn_masked(tape: &mut Tape, params: &ModelParams, prefix: &str, inputs: &[Var], active: &[Vec<bool>], batch: usize) -> Var {
    let hidden = params
        .value(&format!("{prefix}.w_h"))
        .map(|t| t.rows())
        .unwrap_or_else(|| panic!("missing {prefix}.w_h"));
    let mut h = tape.constant(Tensor::zeros(batch, hidden));
    for (x, act) in inputs.iter().zip(active) {
        let cand = rnn_step(tape, params, prefix, *x, h);
        if act.iter().all(|&a| a) {
            h = cand;
            continue;
        }
        let mut keep = Tensor::zeros(batch, hidden);
        let mut carry = Tensor::zeros(batch, hidden);
        for (b, &a) in act.iter().enumerate() {
            let (k, c) = if a { (1.0, 0.0) } else { (0.0, 1.0) };
            keep.row_mut(b).fill(k);
            carry.row_mut(b).fill(c);
        }
        let new_part = tape.mask_mul(cand, keep);
        let old_part = tape.mask_mul(h, carry);
        h = tape.add(new_part, old_part);
    }
    h
}

fn expect_shape(op: &'static str, what: &str, t: &Tensor, rows: usize, cols: usize) -> Result<()> {
    if t.shape() != (rows, cols) {
        return Err(Error::shape(op, format!("{what} is {:?}, expected ({rows}, {cols})", t.shape())));
    }
    Ok(())
}

/// `act(X W + b)` on plain tensors.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor, act: Activation) -> Result<Tensor> {
    if x.cols() != w.rows() {
        return Err(Error::shape("dense_forward", format!("x {:?} · w {:?}", x.shape(), w.shape())));
    }
    expect_shape("dense_forward", "bias", b, 1, w.cols())?;
    let mut tape = Tape::new();
    let (x, w, b) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = dense(&mut tape, x, w, b, act);
    Ok(tape.value(y).clone())
}

/// `act(L X Θ)` on plain tensors, with `L` the `N × N` propagation matrix.
pub fn gcn_layer_forward(propagation: &Tensor, x: &Tensor, theta: &Tensor, act: Activation) -> Result<Tensor> {
    let n = propagation.rows();
    expect_shape("gcn_layer_forward", "propagation", propagation, n, n)?;
    expect_shape("gcn_layer_forward", "X", x, n, x.cols())?;
    expect_shape("gcn_layer_forward", "Θ", theta, x.cols(), theta.cols())?;
    let mut tape = Tape::new();
    let p = tape.constant(propagation.clone());
    let (x, t) = (tape.constant(x.clone()), tape.constant(theta.clone()));
    let z = gcn(&mut tape, p, x, t, act);
    Ok(tape.value(z).clone())
}

/// Plain-tensor LSTM cell parameters.
#[derive(Clone, Debug)]
pub struct LstmWeights {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub b: Tensor,
}

pub fn lstm_step_forward(x_t: &Tensor, h_prev: &Tensor, c_prev: &Tensor, w: &LstmWeights) -> Result<(Tensor, Tensor)> {
    let hidden = w.w_h.rows();
    let batch = x_t.rows();
    expect_shape("lstm_step", "w_x", &w.w_x, x_t.cols(), 4 * hidden)?;
    expect_shape("lstm_step", "w_h", &w.w_h, hidden, 4 * hidden)?;
    expect_shape("lstm_step", "b", &w.b, 1, 4 * hidden)?;
    expect_shape("lstm_step", "h_prev", h_prev, batch, hidden)?;
    expect_shape("lstm_step", "c_prev", c_prev, batch, hidden)?;
    let mut params = ModelParams::new();
    params.insert("cell.w_x", w.w_x.clone());
    params.insert("cell.w_h", w.w_h.clone());
    params.insert("cell.b", w.b.clone());
    let mut tape = Tape::new();
    let (x, h, c) = (
        tape.constant(x_t.clone()),
        tape.constant(h_prev.clone()),
        tape.constant(c_prev.clone()),
    );
    let (h, c) = lstm_step(&mut tape, &params, "cell", x, h, c);
    Ok((tape.value(h).clone(), tape.value(c).clone()))
}

pub fn rnn_step_forward(x_t: &Tensor, h_prev: &Tensor, w_x: &Tensor, w_h: &Tensor, b: &Tensor) -> Result<Tensor> {
    let hidden = w_h.rows();
    expect_shape("rnn_step", "w_x", w_x, x_t.cols(), hidden)?;
    expect_shape("rnn_step", "w_h", w_h, hidden, hidden)?;
    expect_shape("rnn_step", "b", b, 1, hidden)?;
    expect_shape("rnn_step", "h_prev", h_prev, x_t.rows(), hidden)?;
    let mut params = ModelParams::new();
    params.insert("cell.w_x", w_x.clone());
    params.insert("cell.w_h", w_h.clone());
    params.insert("cell.b", b.clone());
    let mut tape = Tape::new();
    let (x, h) = (tape.constant(x_t.clone()), tape.constant(h_prev.clone()));
    let h = rnn_step(&mut tape, &params, "cell", x, h);
    Ok(tape.value(h).clone())
}

/// Dropout on a plain tensor.
pub fn dropout_forward(x: &Tensor, keep_prob: f64, mode: Mode, seed: u64) -> Result<Tensor> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::InvalidInput(format!("keep_prob {keep_prob} outside (0, 1]")));
    }
    let mut rng = crate::seed::rng_for(seed, "dropout");
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = dropout(&mut tape, v, keep_prob, mode, &mut rng);
    Ok(tape.value(y).clone())
}
