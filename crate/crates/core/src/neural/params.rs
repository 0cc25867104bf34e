use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Checkpoint format identifier and version.
pub const CHECKPOINT_FORMAT: &str = "digc-params";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    value: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named parameter tensors plus their Adam moments.
///
/// Iteration and serialization order is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    slots: BTreeMap<String, Slot>,
    step: u64,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: &str, g: Tensor) {
        self.0.insert(name.to_string(), g);
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub(crate) fn accumulate(&mut self, name: &str, g: Tensor) {
        match self.0.get_mut(name) {
            Some(t) => t.add_assign(&g),
            None => {
                self.0.insert(name.to_string(), g);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let (r, c) = value.shape();
        self.slots.insert(
            name.to_string(),
            Slot {
                value,
                m: Tensor::zeros(r, c),
                v: Tensor::zeros(r, c),
            },
        );
    }

    /// Inserts a weight drawn uniformly from ±√(6 / (fan_in + fan_out)).
    ///
    /// The stream is derived from `seed` and the parameter name, so the
    /// initial value does not depend on insertion order.
    pub fn insert_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, seed: u64) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = rng_for(seed, name);
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        self.insert(name, Tensor::from_vec(fan_in, fan_out, data).expect("sized"));
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Tensor::zeros(rows, cols));
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.slots.keys()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// First and second moment of a parameter.
    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        self.slots.get(name).map(|s| (&s.m, &s.v))
    }

    /// One bias-corrected Adam update. Parameters without a gradient are
    /// updated as if their gradient were zero.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads.iter() {
            let slot = self
                .slots
                .get(name)
                .ok_or_else(|| Error::InvalidInput(format!("gradient for unknown parameter `{name}`")))?;
            if g.shape() != slot.value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient {:?} vs parameter `{name}` {:?}", g.shape(), slot.value.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, slot) in self.slots.iter_mut() {
            let g = grads.get(name);
            let n = slot.value.len();
            let (value, m, v) = (slot.value.data_mut(), slot.m.data_mut(), slot.v.data_mut());
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            step: self.step,
            tensors: self
                .slots
                .iter()
                .map(|(name, s)| NamedTensor {
                    name: name.clone(),
                    rows: s.value.rows(),
                    cols: s.value.cols(),
                    values: s.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds parameters from a checkpoint; optimizer moments restart at zero.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut p = ModelParams::new();
        for t in &ck.tensors {
            let value = Tensor::from_vec(t.rows, t.cols, t.values.clone())
                .map_err(|_| Error::Checkpoint(format!("tensor `{}` has wrong length", t.name)))?;
            p.insert(&t.name, value);
        }
        p.step = ck.step;
        Ok(p)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(&ck)
    }

    /// Checks that every expected `(name, rows, cols)` exists with that shape.
    pub fn expect_shapes(&self, expected: &[(String, usize, usize)]) -> Result<()> {
        for (name, r, c) in expected {
            match self.value(name) {
                Some(t) if t.shape() == (*r, *c) => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` is {:?}, expected ({r}, {c})",
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        Ok(())
    }
}

/// Serialized parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::scalar(value));
        p
    }

    fn grad(value: f64) -> Gradients {
        let mut g = Gradients::default();
        g.insert("w", Tensor::scalar(value));
        g
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(0.5);
        p.adam_step(&grad(1.0), &AdamConfig::default()).unwrap();
        let moved = 0.5 - p.value("w").unwrap().get(0, 0);
        assert!((moved - 0.001).abs() < 1e-8, "moved {moved}");
    }

    #[test]
    fn zero_gradient_keeps_parameters_bit_identical() {
        let mut p = ModelParams::new();
        p.insert_glorot("a", 3, 4, 11);
        let before = p.value("a").unwrap().clone();
        let mut g = Gradients::default();
        g.insert("a", Tensor::zeros(3, 4));
        p.adam_step(&g, &AdamConfig::default()).unwrap();
        assert_eq!(p.value("a").unwrap(), &before);
        assert_eq!(p.step(), 1);
    }

    #[test]
    fn three_steps_match_hand_trace() {
        // Hand trace of the update equations with lr=0.001, β1=0.9, β2=0.999, ε=1e-8.
        let gs = [0.2, -0.4, 0.1];
        let (mut w, mut m, mut v) = (1.0_f64, 0.0_f64, 0.0_f64);
        for (i, g) in gs.iter().enumerate() {
            let t = (i + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            w -= 0.001 * (m / (1.0 - 0.9_f64.powi(t))) / ((v / (1.0 - 0.999_f64.powi(t))).sqrt() + 1e-8);
        }
        let mut p = single(1.0);
        for g in gs {
            p.adam_step(&grad(g), &AdamConfig::default()).unwrap();
        }
        assert!((p.value("w").unwrap().get(0, 0) - w).abs() < 1e-12);
        // Frozen from an independent script of the same equations.
        assert!((p.value("w").unwrap().get(0, 0) - 0.999_502_794_223_344_4).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = single(0.0);
        let err = p.adam_step(&grad(f64::NAN), &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(p.step(), 0);
    }

    #[test]
    fn glorot_is_bounded_and_order_independent() {
        let mut a = ModelParams::new();
        a.insert_glorot("x", 10, 20, 3);
        a.insert_glorot("y", 4, 4, 3);
        let mut b = ModelParams::new();
        b.insert_glorot("y", 4, 4, 3);
        b.insert_glorot("x", 10, 20, 3);
        assert_eq!(a, b);
        let lim = (6.0_f64 / 30.0).sqrt();
        assert!(a.value("x").unwrap().data().iter().all(|v| v.abs() <= lim));
    }

    #[test]
    fn checkpoint_is_lexicographic_and_round_trips() {
        let mut p = ModelParams::new();
        p.insert_glorot("b.w", 2, 3, 1);
        p.insert_glorot("a.w", 3, 1, 1);
        let ck = p.to_checkpoint();
        assert_eq!(ck.tensors[0].name, "a.w");
        let text = serde_json::to_string(&ck).unwrap();
        let back = ModelParams::from_checkpoint(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.value("b.w"), p.value("b.w"));
        assert_eq!(back.value("a.w"), p.value("a.w"));
    }
}
