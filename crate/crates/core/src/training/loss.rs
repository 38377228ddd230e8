use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Rescaled square loss.
    #[default]
    Rsl,
    /// Mean squared error against the one-hot target.
    Mse,
    /// Softmax cross-entropy.
    Ce,
}

fn check_label(logits: &[f64], label: usize) -> Result<()> {
    if label >= logits.len() {
        return Err(Error::Parameter(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(())
}

/// `(1/K) (α (z_y − κ)² + Σ_{i≠y} z_i²)` and its gradient.
pub fn rsl_loss(logits: &[f64], label: usize, alpha: f64, kappa: f64) -> Result<(f64, Vec<f64>)> {
    check_label(logits, label)?;
    if !(alpha > 0.0) {
        return Err(Error::Parameter(format!("rsl alpha must be > 0, got {alpha}")));
    }
    let k = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (i, &z) in logits.iter().enumerate() {
        if i == label {
            loss += alpha * (z - kappa) * (z - kappa);
            grad.push(2.0 * alpha * (z - kappa) / k);
        } else {
            loss += z * z;
            grad.push(2.0 * z / k);
        }
    }
    Ok((loss / k, grad))
}

pub fn mse_loss(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    rsl_loss(logits, label, 1.0, 1.0)
}

pub fn ce_loss(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    check_label(logits, label)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - logits[label];
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / total - if i == label { 1.0 } else { 0.0 })
        .collect();
    Ok((loss, grad))
}

/// Loss configuration shared by the trainers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub alpha: f64,
    pub kappa: f64,
}

impl LossSpec {
    pub fn eval(&self, logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        match self.kind {
            LossKind::Rsl => rsl_loss(logits, label, self.alpha, self.kappa),
            LossKind::Mse => mse_loss(logits, label),
            LossKind::Ce => ce_loss(logits, label),
        }
    }
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
