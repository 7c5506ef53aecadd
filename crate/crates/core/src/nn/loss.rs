//! Cross-entropy with per-class complement terms:
//! `l = -Σ_j [ y_j log p_j + (1 - y_j) log(1 - p_j) ]`, averaged over a batch.
//!
//! Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` and terms with
//! a zero coefficient are skipped (`0 · log 0 = 0`).

use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;

fn check(probs: &[f64], label: &[f64]) -> Result<()> {
    if probs.len() != label.len() {
        return Err(Error::contract(format!(
            "loss: {} probabilities vs label of length {}",
            probs.len(),
            label.len()
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!("loss: probabilities sum to {sum}")));
    }
    let ones = label.iter().filter(|&&y| y == 1.0).count();
    let zeros = label.iter().filter(|&&y| y == 0.0).count();
    if ones != 1 || ones + zeros != label.len() {
        return Err(Error::contract("loss: label is not one-hot"));
    }
    Ok(())
}

#[inline]
fn clamp(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Loss of a single prediction.
pub fn cce_loss(probs: &[f64], label: &[f64]) -> Result<f64> {
    check(probs, label)?;
    Ok(loss_unchecked(probs, label))
}

pub(crate) fn loss_unchecked(probs: &[f64], label: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(label) {
        let p = clamp(p);
        if y != 0.0 {
            total += y * p.ln();
        }
        if y != 1.0 {
            total += (1.0 - y) * (1.0 - p).ln();
        }
    }
    -total
}

/// Mean loss over a batch of (probabilities, one-hot label) pairs.
pub fn cce_loss_batch(batch: &[(&[f64], &[f64])]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("loss: empty batch"));
    }
    let mut sum = 0.0;
    for (p, y) in batch {
        sum += cce_loss(p, y)?;
    }
    Ok(sum / batch.len() as f64)
}

/// d loss / d probs for a single example. Clamped coordinates get zero.
pub fn cce_grad(probs: &[f64], label: &[f64]) -> Result<Vec<f64>> {
    check(probs, label)?;
    Ok(grad_unchecked(probs, label))
}

pub(crate) fn grad_unchecked(probs: &[f64], label: &[f64]) -> Vec<f64> {
    probs
        .iter()
        .zip(label)
        .map(|(&p, &y)| {
            if !(PROB_FLOOR..=1.0 - PROB_FLOOR).contains(&p) {
                return 0.0;
            }
            let mut g = 0.0;
            if y != 0.0 {
                g -= y / p;
            }
            if y != 1.0 {
                g += (1.0 - y) / (1.0 - p);
            }
            g
        })
        .collect()
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}
