//! AWGN and Wiener phase-noise channel.
//!
//! The received symbol is `z_k = x_k exp(j phi_k) + n_k` where `n_k` is
//! circularly symmetric complex Gaussian noise of total variance
//! `sigma_n^2` and `phi_k` is a random walk with Gaussian increments of
//! variance `sigma_phi^2`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical channel description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Es/N0 in dB.
    pub snr_db: f64,
    /// Laser linewidth in Hz.
    pub linewidth_hz: f64,
    /// Symbol rate in Baud.
    pub symbol_rate: f64,
    /// Mean symbol energy.
    pub es: f64,
}

impl ChannelParams {
    pub fn new(snr_db: f64, linewidth_hz: f64, symbol_rate: f64) -> Self {
        Self {
            snr_db,
            linewidth_hz,
            symbol_rate,
            es: 1.0,
        }
    }

    pub fn sigma_n(&self) -> f64 {
        sigma_n_from_snr(self.snr_db, self.es)
    }

    pub fn sigma_phi(&self) -> f64 {
        sigma_phi_from_linewidth(self.linewidth_hz, self.symbol_rate)
    }
}

/// Noise standard deviation `sqrt(Es / 10^(snr_db/10))`.
pub fn sigma_n_from_snr(snr_db: f64, es: f64) -> f64 {
    (es / 10f64.powf(snr_db / 10.0)).sqrt()
}

/// Inverse of [`sigma_n_from_snr`].
pub fn snr_db_from_sigma_n(sigma_n: f64, es: f64) -> f64 {
    10.0 * (es / (sigma_n * sigma_n)).log10()
}

/// Phase-increment standard deviation `sqrt(2 pi linewidth / symbol_rate)` in radians.
pub fn sigma_phi_from_linewidth(linewidth_hz: f64, symbol_rate: f64) -> f64 {
    (2.0 * PI * linewidth_hz / symbol_rate).sqrt()
}

/// Inverse of [`sigma_phi_from_linewidth`].
pub fn linewidth_from_sigma_phi(sigma_phi: f64, symbol_rate: f64) -> f64 {
    sigma_phi * sigma_phi * symbol_rate / (2.0 * PI)
}

/// One realization of the carrier phase, unwrapped.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTrace {
    pub phases: Vec<f64>,
    pub start_phase: f64,
}

impl PhaseTrace {
    pub fn zeros(len: usize) -> Self {
        Self::constant(len, 0.0)
    }

    pub fn constant(len: usize, phase: f64) -> Self {
        Self {
            phases: vec![phase; len],
            start_phase: phase,
        }
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }
}

/// Draws a Wiener phase trace of length `len`.
///
/// `phi_0` is the start phase (uniform on `(-pi, pi]` when `random_start`,
/// otherwise zero) and every later sample adds an `N(0, sigma_phi^2)`
/// increment. The start phase is drawn from `start_rng` and the increments
/// from `rng`, so the two can be reproduced independently.
pub fn wiener_phase_trace<R: Rng + ?Sized, S: Rng + ?Sized>(
    len: usize,
    sigma_phi: f64,
    rng: &mut R,
    start_rng: &mut S,
    random_start: bool,
) -> Result<PhaseTrace> {
    if len == 0 {
        return Err(Error::InvalidArgument(
            "phase trace length must be at least 1".into(),
        ));
    }
    if !(sigma_phi >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma_phi must be nonnegative, got {sigma_phi}"
        )));
    }
    let start_phase = if random_start {
        // u in [0, 1) maps onto (-pi, pi].
        let u: f64 = start_rng.random();
        PI - 2.0 * PI * u
    } else {
        0.0
    };
    let mut phases = Vec::with_capacity(len);
    let mut phi = start_phase;
    phases.push(phi);
    for _ in 1..len {
        let step: f64 = StandardNormal.sample(rng);
        phi += sigma_phi * step;
        phases.push(phi);
    }
    Ok(PhaseTrace {
        phases,
        start_phase,
    })
}

/// Draws `len` samples of circularly symmetric complex Gaussian noise with
/// total variance `sigma_n^2`.
pub fn complex_noise<R: Rng + ?Sized>(len: usize, sigma_n: f64, rng: &mut R) -> Vec<Complex64> {
    let s = sigma_n / std::f64::consts::SQRT_2;
    (0..len)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(s * re, s * im)
        })
        .collect()
}

/// `z_k = x_k exp(j phi_k) + n_k` for a given noise realization.
pub fn apply_channel_with_noise(
    symbols: &[Complex64],
    noise: &[Complex64],
    trace: &PhaseTrace,
) -> Result<Vec<Complex64>> {
    if symbols.len() != trace.len() {
        return Err(Error::LengthMismatch {
            op: "apply_channel",
            left: symbols.len(),
            right: trace.len(),
        });
    }
    if symbols.len() != noise.len() {
        return Err(Error::LengthMismatch {
            op: "apply_channel: noise",
            left: symbols.len(),
            right: noise.len(),
        });
    }
    Ok(symbols
        .iter()
        .zip(&trace.phases)
        .zip(noise)
        .map(|((&x, &phi), &n)| x * Complex64::from_polar(1.0, phi) + n)
        .collect())
}

/// Passes `symbols` through the channel, drawing fresh noise from `rng`.
pub fn apply_channel<R: Rng + ?Sized>(
    symbols: &[Complex64],
    sigma_n: f64,
    trace: &PhaseTrace,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    if symbols.len() != trace.len() {
        return Err(Error::LengthMismatch {
            op: "apply_channel",
            left: symbols.len(),
            right: trace.len(),
        });
    }
    let noise = complex_noise(symbols.len(), sigma_n, rng);
    apply_channel_with_noise(symbols, &noise, trace)
}

/// Gradient of a loss w.r.t. the transmitted symbols, given its gradient
/// w.r.t. the received symbols. Noise and phase are constants of the
/// realization, so this is just the inverse rotation.
pub fn apply_channel_backward(grad_received: &[Complex64], trace: &PhaseTrace) -> Vec<Complex64> {
    grad_received
        .iter()
        .zip(&trace.phases)
        .map(|(&g, &phi)| g * Complex64::from_polar(1.0, -phi))
        .collect()
}
