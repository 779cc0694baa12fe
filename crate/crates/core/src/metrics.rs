//! Accuracy, binary F1 and Matthews correlation.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Binary confusion counts with class 1 as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_predictions(pred: &[usize], gold: &[usize]) -> Result<Self> {
        check_lengths(pred, gold)?;
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gold) {
            match (p == 1, g == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_lengths(pred: &[usize], gold: &[usize]) -> Result<()> {
    if pred.len() != gold.len() {
        return contract(format!(
            "prediction count {} differs from gold count {}",
            pred.len(),
            gold.len()
        ));
    }
    if pred.is_empty() {
        return contract("metrics need at least one prediction");
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_lengths(pred, gold)?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// F1 of the positive class; 0 when precision or recall is undefined.
pub fn f1_binary(c: &ConfusionCounts) -> f64 {
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    if tp + fp == 0.0 || tp + fn_ == 0.0 {
        return 0.0;
    }
    let p = tp / (tp + fp);
    let r = tp / (tp + fn_);
    if p + r == 0.0 {
        return 0.0;
    }
    2.0 * p * r / (p + r)
}

/// Matthews correlation coefficient; 0 when any marginal is empty.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
    pub n: usize,
}

impl Metrics {
    pub fn compute(pred: &[usize], gold: &[usize]) -> Result<Self> {
        let counts = ConfusionCounts::from_predictions(pred, gold)?;
        Ok(Self {
            accuracy: accuracy(pred, gold)?,
            f1: f1_binary(&counts),
            mcc: mcc(&counts),
            n: pred.len(),
        })
    }
}
