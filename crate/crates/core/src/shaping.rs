//! Geometric and probabilistic shaping.
//!
//! Point `i` of a constellation carries the `m`-bit label given by the
//! binary expansion of `i`, most significant bit first. Probabilities come
//! from logits through a softmax; with symmetry `s` the logits of length
//! `2^(m-s)` are tiled `2^s` times, which makes the `s` most significant
//! label bits uniform.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Tolerance on the probability-weighted energy of a normalized constellation.
pub const ENERGY_TOLERANCE: f64 = 1e-9;

/// Normalized points with their probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constellation {
    pub points: Vec<Complex64>,
    pub probs: Vec<f64>,
    pub bits_per_symbol: usize,
}

impl Constellation {
    pub fn new(points: Vec<Complex64>, probs: Vec<f64>) -> Result<Self> {
        let m = bits_for_size(points.len())?;
        if probs.len() != points.len() {
            return Err(Error::LengthMismatch {
                op: "Constellation::new",
                left: probs.len(),
                right: points.len(),
            });
        }
        ensure_finite(&probs, "Constellation::new: probs")?;
        if probs.iter().any(|&p| p < 0.0) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "constellation probabilities must be a probability vector".into(),
            ));
        }
        Ok(Self {
            points,
            probs,
            bits_per_symbol: m,
        })
    }

    /// Uniform probabilities; points normalized to unit energy.
    pub fn uniform(points: Vec<Complex64>) -> Result<Self> {
        let probs = vec![1.0 / points.len() as f64; points.len()];
        let points = normalize(&points, &probs)?;
        Self::new(points, probs)
    }

    pub fn size(&self) -> usize {
        self.points.len()
    }

    /// `sum_i p_i |c_i|^2`.
    pub fn energy(&self) -> f64 {
        weighted_energy(&self.points, &self.probs)
    }
}

fn bits_for_size(size: usize) -> Result<usize> {
    if size < 2 || !size.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "constellation size must be a power of two >= 2, got {size}"
        )));
    }
    Ok(size.trailing_zeros() as usize)
}

/// Mapper weight matrix, row 0 real parts and row 1 imaginary parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperWeights {
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
}

impl MapperWeights {
    pub fn new(real: Vec<f64>, imag: Vec<f64>) -> Result<Self> {
        if real.len() != imag.len() {
            return Err(Error::LengthMismatch {
                op: "MapperWeights::new",
                left: real.len(),
                right: imag.len(),
            });
        }
        ensure_finite(&real, "MapperWeights::new")?;
        ensure_finite(&imag, "MapperWeights::new")?;
        Ok(Self { real, imag })
    }

    pub fn size(&self) -> usize {
        self.real.len()
    }
}

/// `c_i = W[0][i] + j W[1][i]`.
pub fn build_constellation(weights: &MapperWeights) -> Vec<Complex64> {
    weights
        .real
        .iter()
        .zip(&weights.imag)
        .map(|(&re, &im)| Complex64::new(re, im))
        .collect()
}

pub fn weighted_energy(points: &[Complex64], probs: &[f64]) -> f64 {
    points
        .iter()
        .zip(probs)
        .map(|(c, p)| p * c.norm_sqr())
        .sum()
}

/// Divides every point by `sqrt(sum_j p_j |c_j|^2)`.
pub fn normalize(points: &[Complex64], probs: &[f64]) -> Result<Vec<Complex64>> {
    if points.len() != probs.len() {
        return Err(Error::LengthMismatch {
            op: "normalize",
            left: points.len(),
            right: probs.len(),
        });
    }
    let energy = weighted_energy(points, probs);
    if !(energy > 0.0) {
        return Err(Error::ZeroEnergy);
    }
    let scale = 1.0 / energy.sqrt();
    Ok(points.iter().map(|c| c * scale).collect())
}

/// Adjoint of [`normalize`]: returns `(dL/dpoints, dL/dprobs)`.
pub fn normalize_backward(
    points: &[Complex64],
    probs: &[f64],
    grad_normalized: &[Complex64],
) -> (Vec<Complex64>, Vec<f64>) {
    let energy = weighted_energy(points, probs);
    let scale = 1.0 / energy.sqrt();
    // dL/dscale
    let g_scale: f64 = grad_normalized
        .iter()
        .zip(points)
        .map(|(g, c)| g.re * c.re + g.im * c.im)
        .sum();
    // dscale/dE = -E^{-3/2} / 2
    let g_energy = -0.5 * g_scale * scale * scale * scale;
    let grad_points = grad_normalized
        .iter()
        .zip(points)
        .zip(probs)
        .map(|((g, c), p)| g * scale + 2.0 * g_energy * p * c)
        .collect();
    let grad_probs = points.iter().map(|c| g_energy * c.norm_sqr()).collect();
    (grad_points, grad_probs)
}

/// Integer value of an MSB-first bit vector.
pub fn bits_to_index(bits: &[u8]) -> usize {
    bits.iter().fold(0, |acc, &b| (acc << 1) | (b as usize & 1))
}

/// MSB-first bit vector of `index`.
pub fn index_to_bits(index: usize, m: usize) -> Vec<u8> {
    (0..m).map(|j| ((index >> (m - 1 - j)) & 1) as u8).collect()
}

/// Bit `j` (0 = most significant) of label `index`.
pub fn label_bit(index: usize, j: usize, m: usize) -> u8 {
    ((index >> (m - 1 - j)) & 1) as u8
}

/// Uppercase hexadecimal label, `ceil(m / 4)` digits.
pub fn hex_label(index: usize, m: usize) -> String {
    let width = m.div_ceil(4).max(1);
    format!("{index:0width$X}")
}

pub fn bits_to_onehot(bits: &[u8]) -> Vec<f64> {
    let mut v = vec![0.0; 1 << bits.len()];
    v[bits_to_index(bits)] = 1.0;
    v
}

/// `onehot . points`.
pub fn select_symbol(onehot: &[f64], points: &[Complex64]) -> Result<Complex64> {
    if onehot.len() != points.len() {
        return Err(Error::LengthMismatch {
            op: "select_symbol",
            left: onehot.len(),
            right: points.len(),
        });
    }
    Ok(onehot.iter().zip(points).map(|(w, c)| c * *w).sum())
}

/// Softmax with the maximum subtracted.
pub fn probs_from_logits(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Adjoint of the softmax.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - inner))
        .collect()
}

/// Tiles `logits_s` `2^s` times.
pub fn expand_symmetry(logits_s: &[f64], s: usize) -> Vec<f64> {
    let reps = 1usize << s;
    let mut out = Vec::with_capacity(logits_s.len() * reps);
    for _ in 0..reps {
        out.extend_from_slice(logits_s);
    }
    out
}

/// Adjoint of [`expand_symmetry`]: sums the tiles.
pub fn expand_symmetry_backward(grad: &[f64], s: usize) -> Vec<f64> {
    let block = grad.len() >> s;
    let mut out = vec![0.0; block];
    for chunk in grad.chunks(block) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

/// Marginal probability that bit `j` (0 = MSB) of the label is one.
pub fn bit_marginal(probs: &[f64], j: usize) -> f64 {
    let m = probs.len().trailing_zeros() as usize;
    probs
        .iter()
        .enumerate()
        .filter(|(i, _)| label_bit(*i, j, m) == 1)
        .map(|(_, p)| p)
        .sum()
}

/// Largest-remainder quantization of `S * probs` into integer counts.
///
/// Counts are floored first; the remaining symbols go to the largest
/// fractional parts, ties to the lowest index.
pub fn quantize_counts(probs: &[f64], total: usize) -> Vec<usize> {
    let scaled: Vec<f64> = probs.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = scaled.iter().map(|x| x.floor().max(0.0) as usize).collect();
    let assigned: usize = counts.iter().sum();
    if assigned > total {
        // Rounding of a slightly super-normalized vector; trim from the back.
        let mut excess = assigned - total;
        for c in counts.iter_mut().rev() {
            let take = (*c).min(excess);
            *c -= take;
            excess -= take;
            if excess == 0 {
                break;
            }
        }
        return counts;
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    let frac = |i: usize| scaled[i] - scaled[i].floor();
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Emits `counts[i]` copies of label `i` and shuffles them uniformly.
pub fn sample_batch<R: Rng + ?Sized>(counts: &[usize], rng: &mut R) -> Vec<usize> {
    let mut labels = Vec::with_capacity(counts.iter().sum());
    for (i, &c) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat_n(i, c));
    }
    labels.shuffle(rng);
    labels
}

/// Maxwell-Boltzmann probabilities `p_i ~ exp(-lambda |c_i|^2)`.
pub fn mb_pmf(points: &[Complex64], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    let logits: Vec<f64> = points.iter().map(|c| -lambda * c.norm_sqr()).collect();
    Ok(probs_from_logits(&logits))
}

/// `sigmoid(raw)`, confining lambda to `(0, 1)`.
pub fn lambda_from_raw(raw: f64) -> f64 {
    crate::cpe::sigmoid(raw)
}

/// Gray-labeled square QAM with `m` (even) bits, normalized to unit energy
/// under uniform probabilities.
///
/// The first `m/2` label bits select the in-phase level and the rest the
/// quadrature level; each axis is a Gray-coded PAM.
pub fn square_qam(m: usize) -> Result<Vec<Complex64>> {
    if m == 0 || !m.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "square QAM needs an even number of bits, got {m}"
        )));
    }
    let half = m / 2;
    let side = 1usize << half;
    let level = |gray: usize| {
        let mut bin = gray;
        let mut shift = gray >> 1;
        while shift > 0 {
            bin ^= shift;
            shift >>= 1;
        }
        2.0 * bin as f64 - (side as f64 - 1.0)
    };
    let points: Vec<Complex64> = (0..1usize << m)
        .map(|i| Complex64::new(level(i >> half), level(i & (side - 1))))
        .collect();
    let probs = vec![1.0 / points.len() as f64; points.len()];
    normalize(&points, &probs)
}

/// Maxwell-Boltzmann shaping on a fixed geometry, normalized self-consistently.
///
/// The probabilities are evaluated on the normalized points themselves, so
/// the scale `a` solves `a^2 sum_i p_i(a) |g_i|^2 = 1` with
/// `p_i(a) ~ exp(-lambda a^2 |g_i|^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MbShaping {
    pub points: Vec<Complex64>,
    pub probs: Vec<f64>,
    pub scale: f64,
    pub lambda: f64,
    /// Number of fixed-point iterations used.
    pub iterations: usize,
}

pub const MB_MAX_ITERATIONS: usize = 50;
pub const MB_SCALE_TOLERANCE: f64 = 1e-12;

pub fn mb_self_consistent(geometry: &[Complex64], lambda: f64) -> Result<MbShaping> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    let energies: Vec<f64> = geometry.iter().map(|c| c.norm_sqr()).collect();
    if !(energies.iter().any(|&e| e > 0.0)) {
        return Err(Error::ZeroEnergy);
    }
    let probs_at = |u: f64| {
        let logits: Vec<f64> = energies.iter().map(|e| -lambda * u * e).collect();
        probs_from_logits(&logits)
    };
    // Solve g(u) = u E_p(u)[|g|^2] - 1 = 0 for u = scale^2.
    let residual = |u: f64| -> (f64, f64) {
        let p = probs_at(u);
        let mean: f64 = p.iter().zip(&energies).map(|(p, e)| p * e).sum();
        let var: f64 = p.iter().zip(&energies).map(|(p, e)| p * (e - mean) * (e - mean)).sum();
        (u * mean - 1.0, mean - lambda * u * var)
    };
    let mut u = 1.0 / (energies.iter().sum::<f64>() / energies.len() as f64);
    let (mut lo, mut hi) = (0.0, u);
    while residual(hi).0 < 0.0 {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() || hi > 1e300 {
            return Err(Error::InvalidArgument(format!(
                "no normalizing scale for lambda {lambda}"
            )));
        }
    }
    let mut iterations = 0;
    for it in 1..=MB_MAX_ITERATIONS {
        iterations = it;
        let (g, dg) = residual(u);
        if g < 0.0 {
            lo = u;
        } else {
            hi = u;
        }
        let mut next = u - g / dg;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let done = (next - u).abs() <= MB_SCALE_TOLERANCE * u;
        u = next;
        if done {
            break;
        }
    }
    let scale = u.sqrt();
    let probs = probs_at(u);
    let points = geometry.iter().map(|c| c * scale).collect();
    Ok(MbShaping {
        points,
        probs,
        scale,
        lambda,
        iterations,
    })
}

impl MbShaping {
    /// `dL/dlambda` from the gradients w.r.t. the normalized points and the
    /// probabilities, by implicit differentiation of the fixed point.
    pub fn lambda_gradient(
        &self,
        geometry: &[Complex64],
        grad_points: &[Complex64],
        grad_probs: &[f64],
    ) -> f64 {
        // With u = a^2 and mu = lambda u, p depends on mu only and the
        // constraint reads mu A(mu) = lambda, A = E_p[|g|^2].
        let energies: Vec<f64> = geometry.iter().map(|c| c.norm_sqr()).collect();
        let mean: f64 = self.probs.iter().zip(&energies).map(|(p, e)| p * e).sum();
        let var: f64 = self
            .probs
            .iter()
            .zip(&energies)
            .map(|(p, e)| p * (e - mean) * (e - mean))
            .sum();
        let u = self.scale * self.scale;
        let mu = self.lambda * u;
        let dmu = 1.0 / (mean - mu * var);
        // dp_i/dmu = -p_i (e_i - A)
        let g_mu_probs: f64 = self
            .probs
            .iter()
            .zip(&energies)
            .zip(grad_probs)
            .map(|((p, e), g)| -g * p * (e - mean))
            .sum();
        // a = A^{-1/2}, da/dmu = A^{-3/2} Var / 2
        let da_dmu = 0.5 * var / (mean * mean.sqrt());
        let g_scale: f64 = grad_points
            .iter()
            .zip(geometry)
            .map(|(g, c)| g.re * c.re + g.im * c.im)
            .sum();
        (g_mu_probs + g_scale * da_dmu) * dmu
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShaperMode {
    Uniform,
    FreeLogits,
    SymmetricLogits,
    MbLambda,
}

/// Configuration of the probabilistic shaper.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShaperConfig {
    pub mode: ShaperMode,
    pub symmetry: usize,
    /// Hidden width when the shaper is conditioned on the channel.
    pub hidden: Option<usize>,
}

impl ShaperConfig {
    /// Number of logits the shaper produces before symmetry expansion.
    pub fn num_logits(&self, m: usize) -> usize {
        match self.mode {
            ShaperMode::Uniform | ShaperMode::FreeLogits => 1 << m,
            ShaperMode::SymmetricLogits => 1 << (m - self.symmetry),
            ShaperMode::MbLambda => 1,
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.mode == ShaperMode::SymmetricLogits && self.symmetry >= m {
            return Err(Error::InvalidArgument(format!(
                "symmetry must lie in [0, {}], got {}",
                m - 1,
                self.symmetry
            )));
        }
        if self.mode != ShaperMode::SymmetricLogits && self.symmetry != 0 {
            return Err(Error::InvalidArgument(
                "symmetry is only used with symmetric logits".into(),
            ));
        }
        Ok(())
    }
}

/// Shaper weights: a stored vector or a one-hidden-layer network on the
/// channel parameters.
pub enum ShaperWeights<'a> {
    Stored(&'a [f64]),
    Network(&'a crate::nn::Mlp, [f64; 2]),
}

/// Logits of length `2^(m-s)` (before symmetry expansion).
pub fn shaper_logits(config: &ShaperConfig, m: usize, weights: ShaperWeights<'_>) -> Result<Vec<f64>> {
    config.validate(m)?;
    let logits = match weights {
        ShaperWeights::Stored(v) => v.to_vec(),
        ShaperWeights::Network(net, inputs) => net.forward_single(&inputs),
    };
    if logits.len() != config.num_logits(m) {
        return Err(Error::LengthMismatch {
            op: "shaper_logits",
            left: logits.len(),
            right: config.num_logits(m),
        });
    }
    ensure_finite(&logits, "shaper_logits")?;
    Ok(logits)
}
