//! Losses and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability clamp used by the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Targets below this speed (km/h) are left out of MAPE.
pub const MAPE_MIN_TARGET: f64 = 1.0;

pub(crate) fn bce_loss_raw(pred: &[f64], target: &[f64], eps: f64) -> f64 {
    let n = pred.len().max(1) as f64;
    -pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum::<f64>()
        / n
}

fn check_pair(op: &'static str, pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::InvalidInput(format!("{op}: empty input")));
    }
    if pred.len() != target.len() {
        return Err(Error::shape(op, format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    Ok(())
}

/// Mean binary cross entropy with predictions clamped to `[ε, 1 − ε]`.
pub fn bce_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair("bce_loss", pred, target)?;
    Ok(bce_loss_raw(pred, target, BCE_EPS))
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair("mse_loss", pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / pred.len() as f64)
}

/// MAPE in percent plus how many targets were excluded for being < 1 km/h.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    pub percent: f64,
    pub used: usize,
    pub excluded: usize,
}

pub fn mape(pred: &[f64], target: &[f64]) -> Result<Mape> {
    check_pair("mape", pred, target)?;
    let mut acc = MapeAccumulator::default();
    for (&p, &y) in pred.iter().zip(target) {
        acc.push(p, y);
    }
    acc.finish()
}

/// Streaming MAPE; the result is independent of push order up to
/// floating-point summation.
#[derive(Clone, Copy, Debug, Default)]
pub struct MapeAccumulator {
    sum: f64,
    used: usize,
    excluded: usize,
}

impl MapeAccumulator {
    pub fn push(&mut self, pred: f64, target: f64) {
        if target < MAPE_MIN_TARGET {
            self.excluded += 1;
        } else {
            self.sum += ((pred - target) / target).abs();
            self.used += 1;
        }
    }

    pub fn merge(&mut self, other: &MapeAccumulator) {
        self.sum += other.sum;
        self.used += other.used;
        self.excluded += other.excluded;
    }

    pub fn finish(&self) -> Result<Mape> {
        if self.used == 0 {
            return Err(Error::InvalidInput("mape: no usable targets".into()));
        }
        Ok(Mape {
            percent: 100.0 * self.sum / self.used as f64,
            used: self.used,
            excluded: self.excluded,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// F1 of binary predictions; precision, recall and F1 are 0 when undefined.
pub fn f1_score(pred: &[bool], truth: &[bool]) -> Result<F1Report> {
    if pred.is_empty() {
        return Err(Error::InvalidInput("f1_score: empty input".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape("f1_score", format!("{} vs {}", pred.len(), truth.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(F1Report {
        f1,
        precision,
        recall,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    })
}
