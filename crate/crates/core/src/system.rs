//! The trainable transceiver and its forward/backward pass over one batch.
//!
//! Parameters are flattened in block order: mapper, shaper, demapper,
//! temperature.

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{apply_channel_backward, apply_channel_with_noise, complex_noise, wiener_phase_trace, PhaseTrace};
use crate::cpe::{bps_with_tape, sigmoid, valid_range, BpsConfig, BpsMode, PhaseSpan};
use crate::demapper::{DemapperNet, LlrBatch};
use crate::error::{Error, Result};
use crate::grad::{Objective, ParamVector};
use crate::metrics::{cross_entropy_bits, cross_entropy_gradient, entropy, entropy_gradient, BmiEstimate};
use crate::nn::{init_glorot, Mlp, MlpCache};
use crate::rng::{substream, Stream};
use crate::shaping::{
    expand_symmetry, expand_symmetry_backward, mb_self_consistent, normalize, normalize_backward,
    probs_from_logits, quantize_counts, sample_batch, softmax_backward, square_qam, Constellation,
    MbShaping,
};

/// Transmitter geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mapper {
    /// Fixed reference geometry (square QAM); not trained.
    Fixed { points: Vec<Complex64> },
    /// Free 2 x M weight matrix.
    Weights { real: Vec<f64>, imag: Vec<f64> },
    /// Network on the channel parameters with 2M outputs (real parts, then imaginary parts).
    Network { mlp: Mlp },
}

/// Transmitter probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shaper {
    Uniform,
    Logits { logits: Vec<f64>, symmetry: usize },
    Network { mlp: Mlp, symmetry: usize },
    /// Maxwell-Boltzmann on the fixed geometry, `lambda = sigmoid(raw)`.
    MbLambda { raw: f64 },
    /// Maxwell-Boltzmann with `lambda = sigmoid(net(sigma))`.
    MbNetwork { mlp: Mlp },
}

impl Mapper {
    fn num_params(&self) -> usize {
        match self {
            Mapper::Fixed { .. } => 0,
            Mapper::Weights { real, imag } => real.len() + imag.len(),
            Mapper::Network { mlp } => mlp.num_params(),
        }
    }
}

impl Shaper {
    fn num_params(&self) -> usize {
        match self {
            Shaper::Uniform => 0,
            Shaper::Logits { logits, .. } => logits.len(),
            Shaper::Network { mlp, .. } | Shaper::MbNetwork { mlp } => mlp.num_params(),
            Shaper::MbLambda { .. } => 1,
        }
    }

    pub fn is_probabilistic(&self) -> bool {
        !matches!(self, Shaper::Uniform)
    }

    pub fn is_maxwell_boltzmann(&self) -> bool {
        matches!(self, Shaper::MbLambda { .. } | Shaper::MbNetwork { .. })
    }
}

/// Architecture choices for [`Model::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub bits_per_symbol: usize,
    pub geometry: GeometryKind,
    pub shaping: ShapingKind,
    pub parameterized: bool,
    pub symmetry: usize,
    pub demapper_hidden: Vec<usize>,
    pub mapper_hidden: usize,
    pub shaper_hidden: usize,
    pub initial_raw_temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryKind {
    Learned,
    SquareQam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapingKind {
    Uniform,
    Learned,
    MaxwellBoltzmann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub bits_per_symbol: usize,
    pub mapper: Mapper,
    pub shaper: Shaper,
    pub demapper: DemapperNet,
    /// `t = sigmoid(raw_temperature)` when the temperature is trained.
    pub raw_temperature: f64,
}

/// Named parameter blocks in flattening order.
pub const BLOCKS: [&str; 4] = ["mapper", "shaper", "demapper", "temperature"];

impl Model {
    pub fn new<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        let m = spec.bits_per_symbol;
        if m == 0 || m > 12 {
            return Err(Error::InvalidArgument(format!(
                "bits per symbol must lie in [1, 12], got {m}"
            )));
        }
        let size = 1usize << m;
        let mapper = match (spec.geometry, spec.parameterized) {
            (GeometryKind::SquareQam, _) => Mapper::Fixed {
                points: square_qam(m)?,
            },
            (GeometryKind::Learned, false) => {
                let w = init_glorot(2, size, rng);
                Mapper::Weights {
                    real: w.row(0).to_vec(),
                    imag: w.row(1).to_vec(),
                }
            }
            (GeometryKind::Learned, true) => Mapper::Network {
                mlp: Mlp::glorot(&[2, spec.mapper_hidden, 2 * size], rng),
            },
        };
        if spec.symmetry >= m {
            return Err(Error::InvalidArgument(format!(
                "symmetry must lie in [0, {}], got {}",
                m - 1,
                spec.symmetry
            )));
        }
        let num_logits = size >> spec.symmetry;
        let shaper = match (spec.shaping, spec.parameterized) {
            (ShapingKind::Uniform, _) => Shaper::Uniform,
            (ShapingKind::Learned, false) => Shaper::Logits {
                logits: vec![0.0; num_logits],
                symmetry: spec.symmetry,
            },
            (ShapingKind::Learned, true) => Shaper::Network {
                mlp: Mlp::glorot(&[2, spec.shaper_hidden, num_logits], rng),
                symmetry: spec.symmetry,
            },
            (ShapingKind::MaxwellBoltzmann, false) => Shaper::MbLambda { raw: 0.0 },
            (ShapingKind::MaxwellBoltzmann, true) => Shaper::MbNetwork {
                mlp: Mlp::glorot(&[2, spec.shaper_hidden, 1], rng),
            },
        };
        if shaper.is_maxwell_boltzmann() && spec.geometry != GeometryKind::SquareQam {
            return Err(Error::InvalidArgument(
                "Maxwell-Boltzmann shaping needs the fixed square QAM geometry".into(),
            ));
        }
        let demapper = DemapperNet::new(m, &spec.demapper_hidden, spec.parameterized, rng);
        Ok(Self {
            bits_per_symbol: m,
            mapper,
            shaper,
            demapper,
            raw_temperature: spec.initial_raw_temperature,
        })
    }

    pub fn size(&self) -> usize {
        1 << self.bits_per_symbol
    }

    pub fn parameterized(&self) -> bool {
        self.demapper.parameterized
    }

    fn block_sizes(&self) -> [usize; 4] {
        [
            self.mapper.num_params(),
            self.shaper.num_params(),
            self.demapper.mlp.num_params(),
            1,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.block_sizes().iter().sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        match &self.mapper {
            Mapper::Fixed { .. } => {}
            Mapper::Weights { real, imag } => {
                out.extend_from_slice(real);
                out.extend_from_slice(imag);
            }
            Mapper::Network { mlp } => mlp.params_into(&mut out),
        }
        match &self.shaper {
            Shaper::Uniform => {}
            Shaper::Logits { logits, .. } => out.extend_from_slice(logits),
            Shaper::Network { mlp, .. } | Shaper::MbNetwork { mlp } => mlp.params_into(&mut out),
            Shaper::MbLambda { raw } => out.push(*raw),
        }
        self.demapper.mlp.params_into(&mut out);
        out.push(self.raw_temperature);
        out
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.num_params() {
            return Err(Error::LengthMismatch {
                op: "Model::set_params",
                left: src.len(),
                right: self.num_params(),
            });
        }
        let mut pos = 0;
        match &mut self.mapper {
            Mapper::Fixed { .. } => {}
            Mapper::Weights { real, imag } => {
                let n = real.len();
                real.copy_from_slice(&src[..n]);
                imag.copy_from_slice(&src[n..2 * n]);
                pos = 2 * n;
            }
            Mapper::Network { mlp } => pos += mlp.set_params(&src[pos..]),
        }
        match &mut self.shaper {
            Shaper::Uniform => {}
            Shaper::Logits { logits, .. } => {
                let n = logits.len();
                logits.copy_from_slice(&src[pos..pos + n]);
                pos += n;
            }
            Shaper::Network { mlp, .. } | Shaper::MbNetwork { mlp } => pos += mlp.set_params(&src[pos..]),
            Shaper::MbLambda { raw } => {
                *raw = src[pos];
                pos += 1;
            }
        }
        pos += self.demapper.mlp.set_params(&src[pos..]);
        self.raw_temperature = src[pos];
        Ok(())
    }

    pub fn param_vector(&self) -> Result<ParamVector> {
        let values = self.params();
        let mut pv = ParamVector::new();
        let mut pos = 0;
        for (name, len) in BLOCKS.iter().zip(self.block_sizes()) {
            if len > 0 {
                pv.push_block(*name, &values[pos..pos + len])?;
            }
            pos += len;
        }
        Ok(pv)
    }

    /// Scaled channel-parameter inputs shared by all networks.
    pub fn channel_inputs(&self, sigma_n: f64, sigma_phi: f64) -> [f64; 2] {
        let s = self.demapper.scaling;
        [sigma_n * s.sigma_n, sigma_phi * s.sigma_phi]
    }

    /// Normalized constellation with its probabilities at a channel point.
    pub fn constellation(&self, sigma_n: f64, sigma_phi: f64) -> Result<Constellation> {
        let tape = self.transmitter_forward(sigma_n, sigma_phi)?;
        Constellation::new(tape.points, tape.probs)
    }

    /// Current temperature when it is trained.
    pub fn trained_temperature(&self) -> f64 {
        sigmoid(self.raw_temperature)
    }

    /// Whether evaluation uses the QAM conventions (zero start phase, quadrant BPS).
    pub fn is_square_qam(&self) -> bool {
        matches!(self.mapper, Mapper::Fixed { .. })
    }

    fn transmitter_forward(&self, sigma_n: f64, sigma_phi: f64) -> Result<TransmitterTape> {
        let m = self.bits_per_symbol;
        let size = self.size();
        let inputs = self.channel_inputs(sigma_n, sigma_phi);
        let input_row = || Array2::from_shape_vec((1, 2), inputs.to_vec()).expect("shape");

        let mut shaper_cache = None;
        let mut mb = None;
        let mut mb_raw_lambda = 0.0;
        let probs = match &self.shaper {
            Shaper::Uniform => vec![1.0 / size as f64; size],
            Shaper::Logits { logits, symmetry } => probs_from_logits(&expand_symmetry(logits, *symmetry)),
            Shaper::Network { mlp, symmetry } => {
                let (out, cache) = mlp.forward_with_cache(input_row());
                shaper_cache = Some(cache);
                let logits = out.into_raw_vec_and_offset().0;
                crate::error::ensure_finite(&logits, "shaper network")?;
                probs_from_logits(&expand_symmetry(&logits, *symmetry))
            }
            Shaper::MbLambda { raw } => {
                mb_raw_lambda = *raw;
                Vec::new()
            }
            Shaper::MbNetwork { mlp } => {
                let (out, cache) = mlp.forward_with_cache(input_row());
                shaper_cache = Some(cache);
                mb_raw_lambda = out[[0, 0]];
                Vec::new()
            }
        };

        let mut mapper_cache = None;
        let raw_points: Vec<Complex64> = match &self.mapper {
            Mapper::Fixed { points } => points.clone(),
            Mapper::Weights { real, imag } => real
                .iter()
                .zip(imag)
                .map(|(&re, &im)| Complex64::new(re, im))
                .collect(),
            Mapper::Network { mlp } => {
                let (out, cache) = mlp.forward_with_cache(input_row());
                mapper_cache = Some(cache);
                (0..size)
                    .map(|i| Complex64::new(out[[0, i]], out[[0, size + i]]))
                    .collect()
            }
        };
        crate::error::ensure_finite(
            &raw_points.iter().flat_map(|c| [c.re, c.im]).collect::<Vec<_>>(),
            "mapper",
        )?;

        let (points, probs) = if self.shaper.is_maxwell_boltzmann() {
            let shaping = mb_self_consistent(&raw_points, sigmoid(mb_raw_lambda))?;
            let out = (shaping.points.clone(), shaping.probs.clone());
            mb = Some(shaping);
            out
        } else {
            let points = normalize(&raw_points, &probs)?;
            (points, probs)
        };
        debug_assert_eq!(points.len(), 1 << m);
        Ok(TransmitterTape {
            inputs,
            raw_points,
            points,
            probs,
            mapper_cache,
            shaper_cache,
            mb,
        })
    }

    /// Gradients of the mapper and shaper blocks, written into `grad`.
    fn transmitter_backward(
        &self,
        tape: &TransmitterTape,
        grad_points: &[Complex64],
        grad_probs: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        let size = self.size();
        let [n_mapper, n_shaper, ..] = self.block_sizes();
        let (g_raw, g_probs_total) = if let Some(mb) = &tape.mb {
            let g_lambda = mb.lambda_gradient(&tape.raw_points, grad_points, grad_probs);
            let lambda = mb.lambda;
            let g_raw_lambda = g_lambda * lambda * (1.0 - lambda);
            match &self.shaper {
                Shaper::MbLambda { .. } => grad[n_mapper] = g_raw_lambda,
                Shaper::MbNetwork { mlp } => {
                    let cache = tape.shaper_cache.as_ref().expect("shaper cache");
                    let g_out = Array2::from_elem((1, 1), g_raw_lambda);
                    let (g, _) = mlp.backward(cache, g_out);
                    grad[n_mapper..n_mapper + n_shaper].copy_from_slice(&g);
                }
                _ => unreachable!("MB tape without MB shaper"),
            }
            return Ok(());
        } else {
            let (g_raw, g_norm_probs) = normalize_backward(&tape.raw_points, &tape.probs, grad_points);
            let total: Vec<f64> = g_norm_probs.iter().zip(grad_probs).map(|(a, b)| a + b).collect();
            (g_raw, total)
        };

        match &self.mapper {
            Mapper::Fixed { .. } => {}
            Mapper::Weights { .. } => {
                for (i, g) in g_raw.iter().enumerate() {
                    grad[i] = g.re;
                    grad[size + i] = g.im;
                }
            }
            Mapper::Network { mlp } => {
                let cache = tape.mapper_cache.as_ref().expect("mapper cache");
                let g_out = Array2::from_shape_fn((1, 2 * size), |(_, j)| {
                    if j < size {
                        g_raw[j].re
                    } else {
                        g_raw[j - size].im
                    }
                });
                let (g, _) = mlp.backward(cache, g_out);
                grad[..n_mapper].copy_from_slice(&g);
            }
        }

        let shaper_grad = &mut grad[n_mapper..n_mapper + n_shaper];
        match &self.shaper {
            Shaper::Uniform => {}
            Shaper::Logits { symmetry, .. } => {
                let g_logits = softmax_backward(&tape.probs, &g_probs_total);
                shaper_grad.copy_from_slice(&expand_symmetry_backward(&g_logits, *symmetry));
            }
            Shaper::Network { mlp, symmetry } => {
                let g_logits = softmax_backward(&tape.probs, &g_probs_total);
                let g_s = expand_symmetry_backward(&g_logits, *symmetry);
                let cache = tape.shaper_cache.as_ref().expect("shaper cache");
                let g_out = Array2::from_shape_vec((1, g_s.len()), g_s).expect("shape");
                let (g, _) = mlp.backward(cache, g_out);
                shaper_grad.copy_from_slice(&g);
            }
            Shaper::MbLambda { .. } | Shaper::MbNetwork { .. } => unreachable!("handled above"),
        }
        Ok(())
    }
}

struct TransmitterTape {
    #[allow(dead_code)]
    inputs: [f64; 2],
    raw_points: Vec<Complex64>,
    points: Vec<Complex64>,
    probs: Vec<f64>,
    mapper_cache: Option<MlpCache>,
    shaper_cache: Option<MlpCache>,
    mb: Option<MbShaping>,
}

/// One channel realization: labels, noise and phase trace.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInput {
    pub labels: Vec<usize>,
    pub noise: Vec<Complex64>,
    pub trace: PhaseTrace,
    pub sigma_n: f64,
    pub sigma_phi: f64,
}

/// How the transmitted labels are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    /// Independent uniform labels.
    Uniform,
    /// Quantized counts of the model distribution, randomly permuted.
    Quantized,
}

/// Draws a realization from the `(seed, index)` substreams.
#[allow(clippy::too_many_arguments)]
pub fn draw_batch(
    probs: &[f64],
    source: LabelSource,
    len: usize,
    sigma_n: f64,
    sigma_phi: f64,
    random_start: bool,
    seed: u64,
    index: u64,
) -> BatchInput {
    let mut bits_rng = substream(seed, Stream::DataBits, index);
    let labels = match source {
        LabelSource::Uniform => (0..len).map(|_| bits_rng.random_range(0..probs.len())).collect(),
        LabelSource::Quantized => sample_batch(&quantize_counts(probs, len), &mut bits_rng),
    };
    let trace = wiener_phase_trace(
        len,
        sigma_phi,
        &mut substream(seed, Stream::Phase, index),
        &mut substream(seed, Stream::StartPhase, index),
        random_start,
    )
    .expect("nonempty batch");
    let noise = complex_noise(len, sigma_n, &mut substream(seed, Stream::Noise, index));
    BatchInput {
        labels,
        noise,
        trace,
        sigma_n,
        sigma_phi,
    }
}

/// Loss variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Binary cross-entropy, for uniform signaling.
    CrossEntropy,
    /// Cross-entropy minus the entropy of the shaper, i.e. minus the BMI.
    NegativeBmi,
}

/// Receiver phase recovery for a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Recovery {
    /// BPS with the given configuration; with `trained_temperature` the
    /// model's own temperature replaces `config.temperature`.
    Bps {
        config: BpsConfig,
        trained_temperature: bool,
    },
    /// Exact inverse rotation by the true phase (fringe masked as for BPS).
    Genie { half_window: usize },
}

impl Recovery {
    fn half_window(&self) -> usize {
        match self {
            Recovery::Bps { config, .. } => config.half_window,
            Recovery::Genie { half_window } => *half_window,
        }
    }
}

/// Result of a batch evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub loss: f64,
    pub bmi: BmiEstimate,
    /// Gradient w.r.t. [`Model::params`], when requested.
    pub gradient: Option<Vec<f64>>,
}

struct ForwardPass {
    valid: std::ops::Range<usize>,
    tx: TransmitterTape,
    tape: Option<crate::cpe::BpsTape>,
    temperature: f64,
    cache: MlpCache,
    batch: LlrBatch,
}

fn forward(model: &Model, input: &BatchInput, recovery: &Recovery) -> Result<ForwardPass> {
    let len = input.labels.len();
    let half_window = recovery.half_window();
    let valid = valid_range(len, half_window);
    if valid.is_empty() {
        return Err(Error::EmptyValidRange { len, half_window });
    }
    let tx = model.transmitter_forward(input.sigma_n, input.sigma_phi)?;
    let symbols: Vec<Complex64> = input.labels.iter().map(|&l| tx.points[l]).collect();
    let received = apply_channel_with_noise(&symbols, &input.noise, &input.trace)?;

    let (corrected, tape, temperature) = match recovery {
        Recovery::Bps {
            config,
            trained_temperature,
        } => {
            let mut config = *config;
            if *trained_temperature {
                config.temperature = model.trained_temperature();
            }
            let (out, tape) = bps_with_tape(&received, &tx.points, &config)?;
            (out.corrected, Some(tape), config.temperature)
        }
        Recovery::Genie { .. } => {
            let corrected = received
                .iter()
                .zip(&input.trace.phases)
                .map(|(z, &phi)| z * Complex64::from_polar(1.0, -phi))
                .collect();
            (corrected, None, 0.0)
        }
    };

    let (llrs, cache) = model
        .demapper
        .demap_batch_with_cache(&corrected[valid.clone()], input.sigma_n, input.sigma_phi);
    let batch = LlrBatch::from_labels(
        llrs.into_raw_vec_and_offset().0,
        &input.labels[valid.clone()],
        model.bits_per_symbol,
    )?;
    Ok(ForwardPass {
        valid,
        tx,
        tape,
        temperature,
        cache,
        batch,
    })
}

/// Per-bit cross-entropy terms in nats and per-point `p log2 p` terms.
fn loss_terms(pass: &ForwardPass) -> (Vec<f64>, Vec<f64>) {
    let ce = pass
        .batch
        .llrs()
        .iter()
        .zip(pass.batch.bits())
        .map(|(&l, &b)| crate::metrics::softplus(if b == 0 { -l } else { l }))
        .collect();
    let plogp = pass
        .tx
        .probs
        .iter()
        .map(|&p| if p > 0.0 { p * p.log2() } else { 0.0 })
        .collect();
    (ce, plogp)
}

/// `loss(a) - loss(b)` on one realization, differenced term by term.
pub fn loss_difference(
    a: &Model,
    b: &Model,
    input: &BatchInput,
    recovery: &Recovery,
    loss: LossKind,
) -> Result<f64> {
    let pa = forward(a, input, recovery)?;
    let pb = forward(b, input, recovery)?;
    let (ce_a, h_a) = loss_terms(&pa);
    let (ce_b, h_b) = loss_terms(&pb);
    let ce: f64 = ce_a.iter().zip(&ce_b).map(|(x, y)| x - y).sum::<f64>()
        / (std::f64::consts::LN_2 * pa.batch.num_symbols() as f64);
    let diff = match loss {
        LossKind::CrossEntropy => ce,
        LossKind::NegativeBmi => ce + h_a.iter().zip(&h_b).map(|(x, y)| x - y).sum::<f64>(),
    };
    if !diff.is_finite() {
        return Err(Error::NonFinite { op: "loss difference" });
    }
    Ok(diff)
}

/// Forward pass and, optionally, backward pass for one realization.
pub fn batch_loss(
    model: &Model,
    input: &BatchInput,
    recovery: &Recovery,
    loss: LossKind,
    want_gradient: bool,
) -> Result<BatchOutcome> {
    let len = input.labels.len();
    let m = model.bits_per_symbol;
    let ForwardPass {
        valid,
        tx,
        tape,
        temperature,
        cache,
        batch,
    } = forward(model, input, recovery)?;
    let ce = cross_entropy_bits(&batch)?;
    let h = entropy(&tx.probs);
    let value = match loss {
        LossKind::CrossEntropy => ce,
        LossKind::NegativeBmi => ce - h,
    };
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "batch loss" });
    }
    let bmi = BmiEstimate {
        value: h - ce,
        entropy: h,
        num_symbols: len,
        valid_symbols: valid.len(),
    };
    if !want_gradient {
        return Ok(BatchOutcome {
            loss: value,
            bmi,
            gradient: None,
        });
    }

    let mut grad = vec![0.0; model.num_params()];
    let [n_mapper, n_shaper, n_demapper, _] = model.block_sizes();
    let g_llr = cross_entropy_gradient(&batch);
    let g_llr = Array2::from_shape_vec((valid.len(), m), g_llr).expect("shape");
    let (g_demapper, g_valid) = model.demapper.backward(&cache, g_llr);
    let d0 = n_mapper + n_shaper;
    grad[d0..d0 + n_demapper].copy_from_slice(&g_demapper);

    let mut g_points = vec![Complex64::new(0.0, 0.0); tx.points.len()];
    let mut g_probs = match loss {
        LossKind::CrossEntropy => vec![0.0; tx.probs.len()],
        LossKind::NegativeBmi => entropy_gradient(&tx.probs).into_iter().map(|g| -g).collect(),
    };

    if let Some(tape) = tape {
        let mut g_corrected = vec![Complex64::new(0.0, 0.0); len];
        g_corrected[valid.clone()].copy_from_slice(&g_valid);
        let g_bps = tape.backward(&g_corrected)?;
        for (g, d) in g_points.iter_mut().zip(&g_bps.constellation) {
            *g += d;
        }
        let g_symbols = apply_channel_backward(&g_bps.z, &input.trace);
        for (&l, g) in input.labels.iter().zip(&g_symbols) {
            g_points[l] += g;
        }
        if let Recovery::Bps {
            trained_temperature: true,
            config,
        } = recovery
        {
            if config.mode == BpsMode::Differentiable {
                let t = temperature;
                grad[d0 + n_demapper] = g_bps.temperature * t * (1.0 - t);
            }
        }
    } else {
        // Genie: corrected = x + n e^{-j phi}, so the gradient reaches x unchanged.
        for (k, g) in valid.clone().zip(&g_valid) {
            g_points[input.labels[k]] += g;
        }
    }

    if model.shaper.is_probabilistic() || !matches!(model.mapper, Mapper::Fixed { .. }) {
        if matches!(model.shaper, Shaper::Uniform) {
            g_probs.iter_mut().for_each(|g| *g = 0.0);
        }
        model.transmitter_backward(&tx, &g_points, &g_probs, &mut grad)?;
    }
    crate::error::ensure_finite(&grad, "batch gradient")?;
    Ok(BatchOutcome {
        loss: value,
        bmi,
        gradient: Some(grad),
    })
}

/// The batch loss as a function of the flattened model parameters, with the
/// realization held fixed.
pub struct BatchObjective<'a> {
    pub model: &'a Model,
    pub input: &'a BatchInput,
    pub recovery: Recovery,
    pub loss: LossKind,
}

impl Objective for BatchObjective<'_> {
    fn value(&self, params: &[f64]) -> Result<f64> {
        let mut model = self.model.clone();
        model.set_params(params)?;
        Ok(batch_loss(&model, self.input, &self.recovery, self.loss, false)?.loss)
    }

    fn value_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut model = self.model.clone();
        model.set_params(params)?;
        let out = batch_loss(&model, self.input, &self.recovery, self.loss, true)?;
        Ok((out.loss, out.gradient.expect("gradient requested")))
    }

    fn value_difference(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        let mut ma = self.model.clone();
        ma.set_params(a)?;
        let mut mb = self.model.clone();
        mb.set_params(b)?;
        loss_difference(&ma, &mb, self.input, &self.recovery, self.loss)
    }
}

/// BPS configuration for a model: quadrant span for square QAM, full span otherwise.
pub fn bps_for_model(model: &Model, base: &BpsConfig, mode: BpsMode, temperature: f64) -> BpsConfig {
    let span = if model.is_square_qam() {
        PhaseSpan::Quadrant
    } else {
        PhaseSpan::Full
    };
    BpsConfig {
        mode,
        temperature,
        phase_span: span,
        ..*base
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(geometry: GeometryKind, shaping: ShapingKind, parameterized: bool) -> ModelSpec {
        ModelSpec {
            bits_per_symbol: 4,
            geometry,
            shaping,
            parameterized,
            symmetry: 0,
            demapper_hidden: vec![8],
            mapper_hidden: 4,
            shaper_hidden: 4,
            initial_raw_temperature: 0.0,
        }
    }

    #[test]
    fn params_round_trip_for_every_variant() {
        let mut rng = substream(1, Stream::Init, 0);
        let variants = [
            spec(GeometryKind::Learned, ShapingKind::Uniform, false),
            spec(GeometryKind::Learned, ShapingKind::Learned, false),
            spec(GeometryKind::Learned, ShapingKind::Learned, true),
            spec(GeometryKind::SquareQam, ShapingKind::Uniform, false),
            spec(GeometryKind::SquareQam, ShapingKind::MaxwellBoltzmann, false),
            spec(GeometryKind::SquareQam, ShapingKind::MaxwellBoltzmann, true),
        ];
        for s in &variants {
            let model = Model::new(s, &mut rng).unwrap();
            let p = model.params();
            assert_eq!(p.len(), model.num_params());
            let mut other = model.clone();
            let shifted: Vec<f64> = p.iter().map(|v| v + 0.5).collect();
            other.set_params(&shifted).unwrap();
            assert_eq!(other.params(), shifted);
            other.set_params(&p).unwrap();
            assert_eq!(other, model);
            assert_eq!(model.param_vector().unwrap().len(), p.len());
        }
    }

    #[test]
    fn constellations_are_normalized() {
        let mut rng = substream(2, Stream::Init, 0);
        for s in [
            spec(GeometryKind::Learned, ShapingKind::Learned, true),
            spec(GeometryKind::SquareQam, ShapingKind::MaxwellBoltzmann, false),
        ] {
            let mut model = Model::new(&s, &mut rng).unwrap();
            if let Shaper::MbLambda { raw } = &mut model.shaper {
                *raw = 1.0;
            }
            let c = model.constellation(0.1, 0.004).unwrap();
            assert!((c.energy() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn maxwell_boltzmann_needs_qam() {
        let mut rng = substream(3, Stream::Init, 0);
        assert!(Model::new(&spec(GeometryKind::Learned, ShapingKind::MaxwellBoltzmann, false), &mut rng).is_err());
    }

    #[test]
    fn short_batch_is_rejected() {
        let mut rng = substream(4, Stream::Init, 0);
        let model = Model::new(&spec(GeometryKind::Learned, ShapingKind::Uniform, false), &mut rng).unwrap();
        let input = draw_batch(&[1.0 / 16.0; 16], LabelSource::Uniform, 32, 0.1, 0.0, true, 1, 0);
        let recovery = Recovery::Genie { half_window: 16 };
        assert_eq!(
            batch_loss(&model, &input, &recovery, LossKind::CrossEntropy, false).unwrap_err(),
            Error::EmptyValidRange {
                len: 32,
                half_window: 16
            }
        );
    }
}
