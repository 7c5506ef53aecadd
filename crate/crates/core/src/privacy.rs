//! Rényi-DP accounting for the subsampled Gaussian mechanism.
//!
//! Each DP-SGD update is a Gaussian mechanism with noise multiplier `σ`
//! applied to a batch drawn at rate `q`. Its RDP at order `α` is
//! `log A_α / (α − 1)` with
//!
//! ```text
//! A_α = E_{z ~ N(0, σ²)} [ ((1 − q) + q·exp((2z − 1) / 2σ²))^α ]
//! ```
//!
//! evaluated by the binomial expansion for integer `α` and by the two-sided
//! erfc series for fractional `α`. RDP composes additively over steps and is
//! converted with `ε = min_α [T·ρ(α) + log(1/δ)/(α − 1)]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    /// `f64::INFINITY` when no noise is added.
    pub epsilon: f64,
    pub delta: f64,
    pub sampling_rate: f64,
    pub steps: usize,
    pub optimal_order: f64,
    /// `(α, total RDP over all steps)`.
    pub order_curve: Vec<(f64, f64)>,
}

/// `{1.25, 1.5, …, 64} ∪ {65, …, 256}`.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (5..=256).map(|k| k as f64 * 0.25).collect();
    orders.extend((65..=256).map(|k| k as f64));
    orders
}

/// Per-step RDP of the subsampled Gaussian at order `alpha`.
///
/// Returns `f64::INFINITY` for `noise_multiplier == 0`.
pub fn rdp_step(alpha: f64, sampling_rate: f64, noise_multiplier: f64) -> Result<f64> {
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(Error::contract(format!("RDP order must be > 1, got {alpha}")));
    }
    if !(sampling_rate > 0.0 && sampling_rate <= 1.0) {
        return Err(Error::contract(format!("sampling rate must lie in (0, 1], got {sampling_rate}")));
    }
    if !(noise_multiplier >= 0.0) {
        return Err(Error::contract(format!("noise multiplier must be >= 0, got {noise_multiplier}")));
    }
    if noise_multiplier == 0.0 {
        return Ok(f64::INFINITY);
    }
    let sigma = noise_multiplier;
    if sampling_rate == 1.0 {
        return Ok(alpha / (2.0 * sigma * sigma));
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_int(alpha as u64, sampling_rate, sigma)
    } else {
        log_a_frac(alpha, sampling_rate, sigma)
    };
    Ok(log_a / (alpha - 1.0))
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn log_sub(a: f64, b: f64) -> f64 {
    debug_assert!(a >= b);
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a == b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// `log erfc(x)`, accurate far into the tail.
fn log_erfc(x: f64) -> f64 {
    if x < 20.0 {
        libm::erfc(x).ln()
    } else {
        // asymptotic series of erfc(x)·x·sqrt(π)·exp(x²)
        let x2 = x * x;
        let r = 1.0 - 0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2) + 6.5625 / (x2 * x2 * x2 * x2);
        -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln() + r.ln()
    }
}

fn log_a_int(alpha: u64, q: f64, sigma: f64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let mut log_binom = 0.0f64;
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        if k > 0 {
            log_binom += ((alpha - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        let term = log_binom + kf * lq + (alpha - k) as f64 * l1q + (kf * kf - kf) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc
}

fn log_a_frac(alpha: f64, q: f64, sigma: f64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let s2 = sigma * sigma;
    let z0 = s2 * (1.0 / q - 1.0).ln() + 0.5;
    let (mut log_a0, mut log_a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut coef = 1.0f64; // binom(alpha, i), signed
    let mut i = 0u64;
    loop {
        if i > 0 {
            coef *= (alpha - (i - 1) as f64) / i as f64;
        }
        if coef == 0.0 {
            break;
        }
        let fi = i as f64;
        let j = alpha - fi;
        let log_coef = coef.abs().ln();
        let log_t0 = log_coef + fi * lq + j * l1q;
        let log_t1 = log_coef + j * lq + fi * l1q;
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / (std::f64::consts::SQRT_2 * sigma));
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / (std::f64::consts::SQRT_2 * sigma));
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * s2) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * s2) + log_e1;
        if coef > 0.0 {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        i += 1;
        if log_s0.max(log_s1) < -30.0 || i > 10_000 {
            break;
        }
    }
    log_add(log_a0, log_a1)
}

/// `(ε, δ)` after `steps` updates at sampling rate `sampling_rate`.
pub fn compute_epsilon(
    noise_multiplier: f64,
    sampling_rate: f64,
    steps: usize,
    delta: f64,
    orders: &[f64],
) -> Result<PrivacyReport> {
    if steps == 0 {
        return Err(Error::contract("steps must be at least 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::contract(format!("delta must lie in (0, 1), got {delta}")));
    }
    if orders.is_empty() {
        return Err(Error::contract("order grid is empty"));
    }
    let mut curve = Vec::with_capacity(orders.len());
    let mut best = (f64::INFINITY, orders[0]);
    for &alpha in orders {
        let total = steps as f64 * rdp_step(alpha, sampling_rate, noise_multiplier)?;
        curve.push((alpha, total));
        let eps = total + (1.0 / delta).ln() / (alpha - 1.0);
        if eps < best.0 {
            best = (eps, alpha);
        }
    }
    Ok(PrivacyReport {
        epsilon: best.0,
        delta,
        sampling_rate,
        steps,
        optimal_order: best.1,
        order_curve: curve,
    })
}

/// Accounting for a DP-SGD run: `q = mb / n`, `steps = epochs · ⌊n / mb⌋`.
pub fn account_training(
    noise_multiplier: f64,
    minibatch: usize,
    dataset_size: usize,
    epochs: usize,
    delta: f64,
) -> Result<PrivacyReport> {
    if dataset_size == 0 || minibatch == 0 {
        return Err(Error::contract("dataset and mini-batch must be non-empty"));
    }
    let mb = minibatch.min(dataset_size);
    let q = mb as f64 / dataset_size as f64;
    let steps = epochs * crate::optim::steps_per_epoch(mb, dataset_size);
    compute_epsilon(noise_multiplier, q, steps, delta, &default_orders())
}
