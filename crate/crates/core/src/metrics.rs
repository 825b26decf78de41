//! Entropy, bitwise mutual information, losses and Maxwell-Boltzmann fitting.

use std::f64::consts::LN_2;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::demapper::LlrBatch;
use crate::error::{Error, Result};

/// Above this magnitude softplus switches to its asymptote.
const SOFTPLUS_LINEAR: f64 = 30.0;

/// Upper end of the lambda search.
pub const LAMBDA_MAX: f64 = 64.0;

/// `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > SOFTPLUS_LINEAR {
        x + (-x).exp()
    } else if x < -SOFTPLUS_LINEAR {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    crate::cpe::sigmoid(x)
}

/// Entropy in bits, with `0 log 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.log2())
        .sum::<f64>()
}

/// `dH/dp_i = -(log2 p_i + 1/ln 2)` for `p_i > 0`.
pub fn entropy_gradient(probs: &[f64]) -> Vec<f64> {
    probs
        .iter()
        .map(|&p| {
            if p > 0.0 {
                -(p.log2() + 1.0 / LN_2)
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BmiEstimate {
    /// Bits per symbol.
    pub value: f64,
    pub entropy: f64,
    pub num_symbols: usize,
    pub valid_symbols: usize,
}

/// Sign that makes a correct decision negative inside the softplus: `+1` for bit 0.
fn bit_sign(b: u8) -> f64 {
    if b == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Mean over symbols of `sum_i log2(1 + exp(-(-1)^b L))`.
pub fn cross_entropy_bits(batch: &LlrBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total: f64 = batch
        .llrs()
        .iter()
        .zip(batch.bits())
        .map(|(&l, &b)| softplus(-bit_sign(b) * l))
        .sum();
    Ok(total / LN_2 / batch.num_symbols() as f64)
}

/// Gradient of [`cross_entropy_bits`] w.r.t. the LLRs.
pub fn cross_entropy_gradient(batch: &LlrBatch) -> Vec<f64> {
    let scale = 1.0 / (LN_2 * batch.num_symbols().max(1) as f64);
    batch
        .llrs()
        .iter()
        .zip(batch.bits())
        .map(|(&l, &b)| {
            let s = bit_sign(b);
            -s * logistic(-s * l) * scale
        })
        .collect()
}

pub fn bmi(batch: &LlrBatch, entropy_bits: f64) -> Result<BmiEstimate> {
    let ce = cross_entropy_bits(batch)?;
    Ok(BmiEstimate {
        value: entropy_bits - ce,
        entropy: entropy_bits,
        num_symbols: batch.num_symbols(),
        valid_symbols: batch.num_symbols(),
    })
}

/// Loss for uniform signaling.
pub fn gcs_loss(batch: &LlrBatch) -> Result<f64> {
    cross_entropy_bits(batch)
}

pub fn gcs_loss_gradient(batch: &LlrBatch) -> Vec<f64> {
    cross_entropy_gradient(batch)
}

pub fn geopcs_loss(batch: &LlrBatch, probs: &[f64]) -> Result<f64> {
    Ok(cross_entropy_bits(batch)? - entropy(probs))
}

/// Gradients of [`geopcs_loss`] w.r.t. the LLRs and the probabilities.
pub fn geopcs_loss_gradient(batch: &LlrBatch, probs: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let g_probs = entropy_gradient(probs).into_iter().map(|g| -g).collect();
    (cross_entropy_gradient(batch), g_probs)
}

/// `sum_i p_i log2(p_i / q_i)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            op: "kl_divergence",
            left: p.len(),
            right: q.len(),
        });
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if !(qi > 0.0) {
                return Err(Error::SupportViolation(i));
            }
            kl += pi * (pi / qi).log2();
        }
    }
    Ok(kl.max(0.0))
}

fn log_partition(energies: &[f64], lambda: f64) -> f64 {
    let max = energies
        .iter()
        .map(|e| -lambda * e)
        .fold(f64::NEG_INFINITY, f64::max);
    max + energies
        .iter()
        .map(|e| (-lambda * e - max).exp())
        .sum::<f64>()
        .ln()
}

/// Maxwell-Boltzmann parameter closest to `p` in KL divergence, and that divergence.
pub fn fit_mb_lambda(points: &[Complex64], p: &[f64]) -> Result<(f64, f64)> {
    if points.len() != p.len() {
        return Err(Error::LengthMismatch {
            op: "fit_mb_lambda",
            left: points.len(),
            right: p.len(),
        });
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty constellation".into()));
    }
    let energies: Vec<f64> = points.iter().map(|c| c.norm_sqr()).collect();
    let mean_p: f64 = p.iter().zip(&energies).map(|(pi, e)| pi * e).sum();
    // KL up to a constant; convex in lambda.
    let f = |lambda: f64| lambda * mean_p + log_partition(&energies, lambda);
    let kl_at = |lambda: f64| -> Result<f64> {
        kl_divergence(p, &crate::shaping::mb_pmf(points, lambda)?)
    };

    let mean_uniform = energies.iter().sum::<f64>() / energies.len() as f64;
    if mean_p >= mean_uniform * (1.0 - 1e-15) {
        return Ok((0.0, kl_at(0.0)?));
    }

    let mut lo = 0.0;
    let mut hi: f64 = 1.0;
    loop {
        let next = (2.0 * hi).min(LAMBDA_MAX);
        if next == hi {
            break;
        }
        if f(next) <= f(hi) {
            lo = hi;
            hi = next;
        } else {
            hi = next;
            break;
        }
    }

    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > 1e-10 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = f(x2);
        }
    }
    let mut best = 0.5 * (a + b);
    for candidate in [lo, hi] {
        if f(candidate) < f(best) {
            best = candidate;
        }
    }
    Ok((best, kl_at(best)?))
}
