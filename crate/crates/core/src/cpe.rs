//! Blind phase search carrier-phase estimation.
//!
//! Both variants share the distance and window-sum stages. The regular
//! variant picks the test phase minimizing the window sum; the
//! differentiable variant replaces that argmin with the dot product of the
//! test phases and a softmin with temperature over the window sums.
//!
//! Window sums are truncated at the block edges and the fringe-free region
//! is reported as `valid`, which is the only region losses and metrics may
//! use.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::ops::Range;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BpsMode {
    Regular,
    Differentiable,
}

/// Range covered by the test phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseSpan {
    /// `[0, 2 pi)`, for constellations without rotational symmetry.
    Full,
    /// `[0, pi/2)`, for square QAM whose phase is referenced at the start.
    Quadrant,
}

impl PhaseSpan {
    pub fn period(self) -> f64 {
        match self {
            PhaseSpan::Full => 2.0 * PI,
            PhaseSpan::Quadrant => FRAC_PI_2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BpsConfig {
    pub num_test_phases: usize,
    pub half_window: usize,
    pub mode: BpsMode,
    pub temperature: f64,
    pub phase_span: PhaseSpan,
}

impl Default for BpsConfig {
    fn default() -> Self {
        Self {
            num_test_phases: 60,
            half_window: 128,
            mode: BpsMode::Regular,
            temperature: 1e-3,
            phase_span: PhaseSpan::Full,
        }
    }
}

impl BpsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_test_phases < 2 {
            return Err(Error::InvalidArgument(format!(
                "BPS needs at least 2 test phases, got {}",
                self.num_test_phases
            )));
        }
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "BPS temperature must lie in (0, 1], got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn with_mode(self, mode: BpsMode) -> Self {
        Self { mode, ..self }
    }

    pub fn with_temperature(self, temperature: f64) -> Self {
        Self {
            temperature,
            ..self
        }
    }

    pub fn with_span(self, phase_span: PhaseSpan) -> Self {
        Self { phase_span, ..self }
    }
}

/// Window sums `D[k][l]`, row-major `K x L`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    /// Indices whose window lies fully inside the block.
    pub valid: Range<usize>,
}

impl DistanceMatrix {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.cols..(k + 1) * self.cols]
    }
}

/// Fringe-free index range `[N, K - N)` (empty when `K <= 2N`).
pub fn valid_range(len: usize, half_window: usize) -> Range<usize> {
    half_window..len.saturating_sub(half_window).max(half_window)
}

/// Test phases `(l / L) * span` for `l = 0..L`.
pub fn test_phases(num: usize, span: PhaseSpan) -> Vec<f64> {
    let period = span.period();
    (0..num).map(|l| l as f64 / num as f64 * period).collect()
}

fn nearest(constellation: &[Complex64], r: Complex64) -> (f64, usize) {
    let mut best = f64::INFINITY;
    let mut idx = 0;
    for (i, c) in constellation.iter().enumerate() {
        let d = (c - r).norm_sqr();
        if d < best {
            best = d;
            idx = i;
        }
    }
    (best, idx)
}

/// `d_l = min_c |c - z exp(-j phi_l)|^2` for every test phase.
pub fn per_symbol_distances(z: Complex64, constellation: &[Complex64], phases: &[f64]) -> Vec<f64> {
    phases
        .iter()
        .map(|&phi| nearest(constellation, z * Complex64::from_polar(1.0, -phi)).0)
        .collect()
}

/// Distances for a whole block plus the index of the minimizing point,
/// both row-major `K x L`. Ties go to the lowest point index.
pub fn block_distances(
    z: &[Complex64],
    constellation: &[Complex64],
    phases: &[f64],
) -> (Vec<f64>, Vec<u32>) {
    let rotations: Vec<Complex64> = phases
        .iter()
        .map(|&phi| Complex64::from_polar(1.0, -phi))
        .collect();
    let mut dist = Vec::with_capacity(z.len() * phases.len());
    let mut arg = Vec::with_capacity(z.len() * phases.len());
    for &zk in z {
        for &rot in &rotations {
            let (d, i) = nearest(constellation, zk * rot);
            dist.push(d);
            arg.push(i as u32);
        }
    }
    (dist, arg)
}

/// Per-column sums over the window `[k - N, k + N]`, truncated at the edges.
pub fn sliding_window_sum(d: &[f64], rows: usize, cols: usize, half_window: usize) -> DistanceMatrix {
    assert_eq!(d.len(), rows * cols, "distance matrix shape");
    let mut prefix = vec![0.0; (rows + 1) * cols];
    for k in 0..rows {
        for l in 0..cols {
            prefix[(k + 1) * cols + l] = prefix[k * cols + l] + d[k * cols + l];
        }
    }
    let mut values = vec![0.0; rows * cols];
    for k in 0..rows {
        let lo = k.saturating_sub(half_window);
        let hi = (k + half_window + 1).min(rows);
        for l in 0..cols {
            values[k * cols + l] = prefix[hi * cols + l] - prefix[lo * cols + l];
        }
    }
    DistanceMatrix {
        values,
        rows,
        cols,
        valid: valid_range(rows, half_window),
    }
}

/// `w_i = exp(-x_i / t) / sum_j exp(-x_j / t)`, evaluated with the minimum
/// subtracted so that tiny temperatures do not overflow.
pub fn softmin_t(x: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "softmin temperature must be positive, got {t}"
        )));
    }
    let mut w = vec![0.0; x.len()];
    softmin_into(x, t, &mut w);
    ensure_finite(&w, "softmin_t")?;
    Ok(w)
}

fn softmin_into(x: &[f64], t: f64, out: &mut [f64]) {
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (-(v - min) / t).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Test phase at the minimizing index; ties go to the lowest index.
pub fn estimate_phase_regular(d_row: &[f64], phases: &[f64]) -> f64 {
    phases[argmin(d_row)]
}

fn argmin(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v < x[best] {
            best = i;
        }
    }
    best
}

/// `phases . softmin_t(d_row)`.
pub fn estimate_phase_soft(d_row: &[f64], phases: &[f64], t: f64) -> Result<f64> {
    if d_row.len() != phases.len() {
        return Err(Error::LengthMismatch {
            op: "estimate_phase_soft",
            left: d_row.len(),
            right: phases.len(),
        });
    }
    let w = softmin_t(d_row, t)?;
    Ok(dot(&w, phases))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// Consecutive differences within this much of pi are left alone, so that
// rounding in a previous unwrap does not trigger a second correction.
const UNWRAP_SLACK: f64 = 1e-12;

/// Offsets (multiples of `period`) that bring consecutive differences of
/// `phi` into `(-period/2, period/2]`.
pub fn unwrap_offsets(phi: &[f64], period: f64) -> Vec<f64> {
    let mut offsets = Vec::with_capacity(phi.len());
    let mut acc = 0.0;
    for (k, &p) in phi.iter().enumerate() {
        if k > 0 {
            let delta = p - phi[k - 1];
            let n = ((delta - period / 2.0) / period - UNWRAP_SLACK).ceil();
            acc -= n * period;
        }
        offsets.push(acc);
    }
    offsets
}

/// Unwraps with an arbitrary period; the first sample is unchanged.
pub fn unwrap_with_period(phi: &[f64], period: f64) -> Vec<f64> {
    phi.iter()
        .zip(unwrap_offsets(phi, period))
        .map(|(p, o)| p + o)
        .collect()
}

/// Adds multiples of `2 pi` so consecutive differences lie in `(-pi, pi]`.
pub fn unwrap(phi: &[f64]) -> Vec<f64> {
    unwrap_with_period(phi, 2.0 * PI)
}

/// `x_k = z_k exp(-j phi_k)`.
pub fn correct(z: &[Complex64], phi: &[f64]) -> Result<Vec<Complex64>> {
    if z.len() != phi.len() {
        return Err(Error::LengthMismatch {
            op: "correct",
            left: z.len(),
            right: phi.len(),
        });
    }
    Ok(z.iter()
        .zip(phi)
        .map(|(&zk, &p)| zk * Complex64::from_polar(1.0, -p))
        .collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on `(0, 1)`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Temperature `sigmoid(t_star)`, confined to `(0, 1)`.
pub fn temperature_from_raw(t_star: f64) -> f64 {
    sigmoid(t_star)
}

/// Result of a BPS pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BpsOutput {
    /// Phase-corrected symbols.
    pub corrected: Vec<Complex64>,
    /// Unwrapped phase estimates used for the correction.
    pub unwrapped: Vec<f64>,
    /// Raw per-symbol estimates before unwrapping.
    pub raw: Vec<f64>,
    pub valid: Range<usize>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BpsTape {
    mode: BpsMode,
    temperature: f64,
    half_window: usize,
    phases: Vec<f64>,
    cols: usize,
    z: Vec<Complex64>,
    constellation: Vec<Complex64>,
    argmin: Vec<u32>,
    window: Vec<f64>,
    weights: Vec<f64>,
    raw: Vec<f64>,
    unwrapped: Vec<f64>,
    corrected: Vec<Complex64>,
}

/// Gradients of a scalar loss w.r.t. the BPS inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BpsGrad {
    pub z: Vec<Complex64>,
    pub constellation: Vec<Complex64>,
    pub temperature: f64,
}

/// Runs the full BPS pipeline.
pub fn bps(z: &[Complex64], constellation: &[Complex64], config: &BpsConfig) -> Result<BpsOutput> {
    bps_with_tape(z, constellation, config).map(|(out, _)| out)
}

/// Runs BPS and keeps what the backward pass needs.
pub fn bps_with_tape(
    z: &[Complex64],
    constellation: &[Complex64],
    config: &BpsConfig,
) -> Result<(BpsOutput, BpsTape)> {
    config.validate()?;
    if constellation.is_empty() {
        return Err(Error::InvalidArgument("empty constellation".into()));
    }
    if z.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let phases = test_phases(config.num_test_phases, config.phase_span);
    let cols = phases.len();
    let (dist, argmin_idx) = block_distances(z, constellation, &phases);
    let window = sliding_window_sum(&dist, z.len(), cols, config.half_window);
    ensure_finite(&window.values, "bps: window sum")?;

    let mut raw = Vec::with_capacity(z.len());
    let mut weights = Vec::new();
    match config.mode {
        BpsMode::Regular => {
            for k in 0..z.len() {
                raw.push(estimate_phase_regular(window.row(k), &phases));
            }
        }
        BpsMode::Differentiable => {
            weights = vec![0.0; z.len() * cols];
            for k in 0..z.len() {
                let w = &mut weights[k * cols..(k + 1) * cols];
                softmin_into(window.row(k), config.temperature, w);
                raw.push(dot(w, &phases));
            }
            ensure_finite(&raw, "bps: soft phase estimate")?;
        }
    }

    let period = config.phase_span.period();
    let mut reference = raw.clone();
    if config.phase_span == PhaseSpan::Quadrant && reference[0] > FRAC_PI_4 {
        // The quadrant estimator is referenced to a zero start phase.
        reference[0] -= period;
    }
    let unwrapped = unwrap_with_period(&reference, period);
    let corrected = correct(z, &unwrapped)?;

    let tape = BpsTape {
        mode: config.mode,
        temperature: config.temperature,
        half_window: config.half_window,
        phases,
        cols,
        z: z.to_vec(),
        constellation: constellation.to_vec(),
        argmin: argmin_idx,
        window: window.values,
        weights,
        raw: raw.clone(),
        unwrapped: unwrapped.clone(),
        corrected: corrected.clone(),
    };
    Ok((
        BpsOutput {
            corrected,
            unwrapped,
            raw,
            valid: window.valid,
        },
        tape,
    ))
}

impl BpsTape {
    /// Back-propagates `grad_corrected` (real-pair gradient
    /// `dL/dRe + j dL/dIm` per corrected symbol).
    ///
    /// Unwrap offsets are constants. In regular mode the phase estimate is
    /// piecewise constant, so only the direct path through the correction
    /// contributes.
    pub fn backward(&self, grad_corrected: &[Complex64]) -> Result<BpsGrad> {
        let k_len = self.z.len();
        if grad_corrected.len() != k_len {
            return Err(Error::LengthMismatch {
                op: "bps backward",
                left: grad_corrected.len(),
                right: k_len,
            });
        }
        let cols = self.cols;
        let mut grad_z = vec![Complex64::new(0.0, 0.0); k_len];
        let mut grad_c = vec![Complex64::new(0.0, 0.0); self.constellation.len()];
        let mut grad_t = 0.0;

        // Correction: x = z exp(-j phi).
        let mut grad_phi = vec![0.0; k_len];
        for k in 0..k_len {
            let g = grad_corrected[k];
            let x = self.corrected[k];
            // dx/dphi = -j x  ->  real pair (Im x, -Re x).
            grad_phi[k] = g.re * x.im - g.im * x.re;
        }
        for k in 0..k_len {
            grad_z[k] += grad_corrected[k] * Complex64::from_polar(1.0, self.unwrapped[k]);
        }

        if self.mode == BpsMode::Differentiable {
            let t = self.temperature;
            let mut grad_window = vec![0.0; k_len * cols];
            for k in 0..k_len {
                let gp = grad_phi[k];
                if gp == 0.0 {
                    continue;
                }
                let w = &self.weights[k * cols..(k + 1) * cols];
                let d = &self.window[k * cols..(k + 1) * cols];
                let phi_hat = self.raw[k];
                let d_mean = dot(w, d);
                let mut dphi_dt = 0.0;
                for l in 0..cols {
                    grad_window[k * cols + l] = -gp * w[l] * (self.phases[l] - phi_hat) / t;
                    dphi_dt += self.phases[l] * w[l] * (d[l] - d_mean);
                }
                grad_t += gp * dphi_dt / (t * t);
            }
            // The window is symmetric, so its adjoint is the same window sum.
            let grad_dist = sliding_window_sum(&grad_window, k_len, cols, self.half_window).values;
            let rotations: Vec<Complex64> = self
                .phases
                .iter()
                .map(|&p| Complex64::from_polar(1.0, -p))
                .collect();
            for k in 0..k_len {
                for l in 0..cols {
                    let g = grad_dist[k * cols + l];
                    if g == 0.0 {
                        continue;
                    }
                    let i = self.argmin[k * cols + l] as usize;
                    let r = self.z[k] * rotations[l];
                    let diff = self.constellation[i] - r;
                    grad_c[i] += 2.0 * g * diff;
                    // r = z exp(-j phi_l): rotate the adjoint back.
                    grad_z[k] += -2.0 * g * diff * rotations[l].conj();
                }
            }
        }
        ensure_finite(&[grad_t], "bps backward: temperature")?;
        Ok(BpsGrad {
            z: grad_z,
            constellation: grad_c,
            temperature: grad_t,
        })
    }
}
