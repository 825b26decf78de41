//! Training loops, validation and checkpoints.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{apply_channel_with_noise, sigma_n_from_snr, sigma_phi_from_linewidth};
use crate::cpe::{bps, BpsConfig, BpsMode, PhaseSpan};
use crate::demapper::{DemapperNet, LlrBatch};
use crate::error::{Error, Result};
use crate::grad::{adam_step, AdamConfig, AdamState};
use crate::metrics::{bmi, entropy, BmiEstimate};
use crate::rng::{substream, Stream};
use crate::shaping::{quantize_counts, Constellation};
use crate::system::{
    batch_loss, draw_batch, GeometryKind, LabelSource, LossKind, Model, ModelSpec, Recovery, ShapingKind,
};

/// Current checkpoint layout.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Stream index of the validation realization.
pub const VALIDATION_INDEX: u64 = 1 << 40;

/// First stream index used by evaluation sweeps.
pub const EVALUATION_INDEX: u64 = 1 << 41;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Learned geometry, uniform probabilities.
    Gcs,
    /// Learned geometry and probabilities.
    Geopcs,
    /// Square QAM with learned Maxwell-Boltzmann parameter.
    QamPcs,
    /// Uniform square QAM; only the demapper is trained.
    Qam,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Gcs => "gcs",
            TrainMode::Geopcs => "geopcs",
            TrainMode::QamPcs => "qam_pcs",
            TrainMode::Qam => "qam",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [TrainMode::Gcs, TrainMode::Geopcs, TrainMode::QamPcs, TrainMode::Qam]
            .into_iter()
            .find(|m| m.name() == name)
    }

    pub fn is_square_qam(self) -> bool {
        matches!(self, TrainMode::QamPcs | TrainMode::Qam)
    }

    pub fn is_probabilistic(self) -> bool {
        matches!(self, TrainMode::Geopcs | TrainMode::QamPcs)
    }
}

/// Closed interval; `min == max` is a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub fn fixed(v: f64) -> Self {
        Self { min: v, max: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }
}

/// Training channel: SNR and linewidth ranges at a symbol rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelRanges {
    pub snr_db: Interval,
    pub linewidth_hz: Interval,
    pub symbol_rate: f64,
}

impl ChannelRanges {
    pub fn fixed(snr_db: f64, linewidth_hz: f64, symbol_rate: f64) -> Self {
        Self {
            snr_db: Interval::fixed(snr_db),
            linewidth_hz: Interval::fixed(linewidth_hz),
            symbol_rate,
        }
    }

    /// Range of `sigma_n` (ascending).
    pub fn sigma_n(&self) -> Interval {
        Interval {
            min: sigma_n_from_snr(self.snr_db.max, 1.0),
            max: sigma_n_from_snr(self.snr_db.min, 1.0),
        }
    }

    /// Range of `sigma_phi` (ascending).
    pub fn sigma_phi(&self) -> Interval {
        Interval {
            min: sigma_phi_from_linewidth(self.linewidth_hz.min, self.symbol_rate),
            max: sigma_phi_from_linewidth(self.linewidth_hz.max, self.symbol_rate),
        }
    }

    pub fn contains(&self, snr_db: f64, linewidth_hz: f64) -> bool {
        self.snr_db.contains(snr_db) && self.linewidth_hz.contains(linewidth_hz)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.snr_db.min.is_finite()
            && self.snr_db.max.is_finite()
            && self.snr_db.min <= self.snr_db.max
            && self.linewidth_hz.min >= 0.0
            && self.linewidth_hz.min <= self.linewidth_hz.max
            && self.linewidth_hz.max.is_finite()
            && self.symbol_rate > 0.0
            && self.symbol_rate.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid channel ranges: snr [{}, {}] dB, linewidth [{}, {}] Hz, symbol rate {}",
                self.snr_db.min, self.snr_db.max, self.linewidth_hz.min, self.linewidth_hz.max, self.symbol_rate
            )))
        }
    }
}

/// One uniform draw per batch in sigma space.
pub fn sample_channel_params<R: Rng + ?Sized>(ranges: &ChannelRanges, rng: &mut R) -> (f64, f64) {
    let draw = |r: Interval, rng: &mut R| {
        if r.min == r.max {
            r.min
        } else {
            rng.random_range(r.min..=r.max)
        }
    };
    let sn = draw(ranges.sigma_n(), rng);
    let sp = draw(ranges.sigma_phi(), rng);
    (sn, sp)
}

/// Geometric interpolation from `t_start` at epoch 0 to `t_end` at the last epoch.
pub fn anneal_temperature(epoch: usize, epochs: usize, t_start: f64, t_end: f64) -> f64 {
    if epochs <= 1 {
        return t_start;
    }
    let frac = epoch as f64 / (epochs - 1) as f64;
    t_start * (t_end / t_start).powf(frac)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub parameterized: bool,
    pub bits_per_symbol: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub num_test_phases: usize,
    pub half_window: usize,
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub trainable_temperature: bool,
    pub initial_raw_temperature: f64,
    pub channel: ChannelRanges,
    pub seed: u64,
    pub symmetry: usize,
    pub demapper_hidden: Vec<usize>,
    pub mapper_hidden: usize,
    pub shaper_hidden: usize,
    pub validation_symbols: usize,
    /// Validate every this many epochs (and after the last one).
    pub validation_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Gcs,
            parameterized: false,
            bits_per_symbol: 6,
            epochs: 50,
            batches_per_epoch: 10,
            batch_size: 5000,
            learning_rate: 1e-3,
            num_test_phases: 60,
            half_window: 128,
            temperature_start: 1.0,
            temperature_end: 1e-3,
            trainable_temperature: false,
            initial_raw_temperature: 0.0,
            channel: ChannelRanges::fixed(17.0, 100e3, 32e9),
            seed: 1,
            symmetry: 0,
            demapper_hidden: vec![128, 128],
            mapper_hidden: 32,
            shaper_hidden: 32,
            validation_symbols: 10_000,
            validation_interval: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let m = self.bits_per_symbol;
        if m == 0 || m > 12 {
            return bad(format!("bits_per_symbol must lie in [1, 12], got {m}"));
        }
        if self.mode.is_square_qam() && !m.is_multiple_of(2) {
            return bad(format!("square QAM needs an even bits_per_symbol, got {m}"));
        }
        if self.batch_size <= 2 * self.half_window {
            return bad(format!(
                "batch_size ({}) must exceed 2 * bps.half_window ({}) so that the fringe-free range is nonempty",
                self.batch_size,
                2 * self.half_window
            ));
        }
        if self.validation_symbols <= 2 * self.half_window {
            return bad(format!(
                "validation.symbols ({}) must exceed 2 * bps.half_window ({})",
                self.validation_symbols,
                2 * self.half_window
            ));
        }
        if self.num_test_phases == 0 {
            return bad("bps.num_test_phases must be positive".into());
        }
        if !(self.temperature_end > 0.0 && self.temperature_start >= self.temperature_end)
            || !self.temperature_start.is_finite()
        {
            return bad(format!(
                "temperatures must satisfy start >= end > 0, got start {} end {}",
                self.temperature_start, self.temperature_end
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be a nonnegative number, got {}", self.learning_rate));
        }
        if !self.initial_raw_temperature.is_finite() {
            return bad("temperature.initial_raw must be finite".into());
        }
        if self.batches_per_epoch == 0 {
            return bad("batches_per_epoch must be positive".into());
        }
        if self.validation_interval == 0 {
            return bad("validation.interval must be positive".into());
        }
        if self.symmetry >= m {
            return bad(format!("symmetry must lie in [0, {}], got {}", m - 1, self.symmetry));
        }
        if self.symmetry != 0 && self.mode != TrainMode::Geopcs {
            return bad("symmetry only applies to geopcs".into());
        }
        if self.trainable_temperature && self.mode.is_square_qam() {
            return bad("trainable_temperature needs the differentiable BPS of gcs or geopcs".into());
        }
        if self.demapper_hidden.contains(&0) || self.mapper_hidden == 0 || self.shaper_hidden == 0 {
            return bad("hidden layer widths must be positive".into());
        }
        self.channel.validate()
    }

    pub fn model_spec(&self) -> ModelSpec {
        let (geometry, shaping) = match self.mode {
            TrainMode::Gcs => (GeometryKind::Learned, ShapingKind::Uniform),
            TrainMode::Geopcs => (GeometryKind::Learned, ShapingKind::Learned),
            TrainMode::QamPcs => (GeometryKind::SquareQam, ShapingKind::MaxwellBoltzmann),
            TrainMode::Qam => (GeometryKind::SquareQam, ShapingKind::Uniform),
        };
        ModelSpec {
            bits_per_symbol: self.bits_per_symbol,
            geometry,
            shaping,
            parameterized: self.parameterized,
            symmetry: self.symmetry,
            demapper_hidden: self.demapper_hidden.clone(),
            mapper_hidden: self.mapper_hidden,
            shaper_hidden: self.shaper_hidden,
            initial_raw_temperature: self.initial_raw_temperature,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        if self.mode.is_probabilistic() {
            LossKind::NegativeBmi
        } else {
            LossKind::CrossEntropy
        }
    }

    fn label_source(&self) -> LabelSource {
        if self.mode.is_probabilistic() {
            LabelSource::Quantized
        } else {
            LabelSource::Uniform
        }
    }

    fn bps_base(&self) -> BpsConfig {
        BpsConfig {
            num_test_phases: self.num_test_phases,
            half_window: self.half_window,
            mode: BpsMode::Regular,
            temperature: self.temperature_end,
            phase_span: if self.mode.is_square_qam() {
                PhaseSpan::Quadrant
            } else {
                PhaseSpan::Full
            },
        }
    }

    /// Receiver used by training steps at `temperature`.
    pub fn train_recovery(&self, temperature: f64) -> Recovery {
        let mut config = self.bps_base();
        if !self.mode.is_square_qam() {
            config.mode = BpsMode::Differentiable;
            config.temperature = temperature;
        }
        Recovery::Bps {
            config,
            trained_temperature: self.trainable_temperature,
        }
    }

    /// Validation channel point: the midpoint of the sigma ranges.
    pub fn validation_point(&self) -> (f64, f64) {
        (self.channel.sigma_n().midpoint(), self.channel.sigma_phi().midpoint())
    }
}

/// Phase recovery used by an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalCpe {
    Regular,
    Soft { temperature: f64 },
    Genie,
}

/// Receiver conventions for an evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSetup {
    pub cpe: EvalCpe,
    pub num_test_phases: usize,
    pub half_window: usize,
    /// Zero start phase and quadrant BPS.
    pub square_qam: bool,
}

/// Monte-Carlo BMI of a constellation and demapper on one realization.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_constellation(
    constellation: &Constellation,
    demapper: &DemapperNet,
    setup: &EvalSetup,
    sigma_n: f64,
    sigma_phi: f64,
    num_symbols: usize,
    seed: u64,
    index: u64,
) -> Result<BmiEstimate> {
    let m = constellation.bits_per_symbol;
    if demapper.bits_per_symbol() != m {
        return Err(Error::LengthMismatch {
            op: "evaluate: demapper outputs",
            left: demapper.bits_per_symbol(),
            right: m,
        });
    }
    if num_symbols <= 2 * setup.half_window {
        return Err(Error::EmptyValidRange {
            len: num_symbols,
            half_window: setup.half_window,
        });
    }
    let input = draw_batch(
        &constellation.probs,
        LabelSource::Quantized,
        num_symbols,
        sigma_n,
        sigma_phi,
        !setup.square_qam,
        seed,
        index,
    );
    let symbols: Vec<Complex64> = input.labels.iter().map(|&l| constellation.points[l]).collect();
    let received = apply_channel_with_noise(&symbols, &input.noise, &input.trace)?;
    let span = if setup.square_qam {
        PhaseSpan::Quadrant
    } else {
        PhaseSpan::Full
    };
    let (corrected, valid) = match setup.cpe {
        EvalCpe::Genie => {
            let corrected: Vec<Complex64> = received
                .iter()
                .zip(&input.trace.phases)
                .map(|(z, &phi)| z * Complex64::from_polar(1.0, -phi))
                .collect();
            (corrected, crate::cpe::valid_range(num_symbols, setup.half_window))
        }
        EvalCpe::Regular | EvalCpe::Soft { .. } => {
            let (mode, temperature) = match setup.cpe {
                EvalCpe::Soft { temperature } => (BpsMode::Differentiable, temperature),
                _ => (BpsMode::Regular, 1e-3),
            };
            let config = BpsConfig {
                num_test_phases: setup.num_test_phases,
                half_window: setup.half_window,
                mode,
                temperature,
                phase_span: span,
            };
            let out = bps(&received, &constellation.points, &config)?;
            (out.corrected, out.valid)
        }
    };
    let llrs = demapper.demap_batch(&corrected[valid.clone()], sigma_n, sigma_phi);
    let batch = LlrBatch::from_labels(llrs.into_raw_vec_and_offset().0, &input.labels[valid], m)?;
    let mut est = bmi(&batch, entropy(&constellation.probs))?;
    est.num_symbols = num_symbols;
    Ok(est)
}

/// Monte-Carlo BMI of a model at one channel point.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    sigma_n: f64,
    sigma_phi: f64,
    num_symbols: usize,
    cpe: EvalCpe,
    num_test_phases: usize,
    half_window: usize,
    seed: u64,
    index: u64,
) -> Result<BmiEstimate> {
    let setup = EvalSetup {
        cpe,
        num_test_phases,
        half_window,
        square_qam: model.is_square_qam(),
    };
    let constellation = model.constellation(sigma_n, sigma_phi)?;
    evaluate_constellation(
        &constellation,
        &model.demapper,
        &setup,
        sigma_n,
        sigma_phi,
        num_symbols,
        seed,
        index,
    )
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub validation_bmi: Option<f64>,
    pub entropy: f64,
    /// Temperature used by the epoch's training steps.
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed training steps; also the next random stream index.
    pub global_step: u64,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cp: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if cp.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                cp.format_version
            )));
        }
        if cp.adam.first_moment.len() != cp.model.num_params() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        Ok(cp)
    }
}

/// Training stopped on a non-finite value; `checkpoint` holds the last finite state.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("training diverged at step {}: {cause}", checkpoint.global_step)]
pub struct Diverged {
    pub checkpoint: Box<Checkpoint>,
    pub cause: Error,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Invalid(#[from] Error),
    #[error(transparent)]
    Diverged(#[from] Diverged),
}

/// Stateful training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub epoch: usize,
    pub global_step: u64,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model_spec(), &mut substream(config.seed, Stream::Init, 0))?;
        let adam = AdamState::new(model.num_params());
        Ok(Self {
            config,
            model,
            adam,
            epoch: 0,
            global_step: 0,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(cp: Checkpoint) -> Result<Self> {
        cp.config.validate()?;
        Ok(Self {
            config: cp.config,
            model: cp.model,
            adam: cp.adam,
            epoch: cp.epoch,
            global_step: cp.global_step,
            history: cp.history,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            model: self.model.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            global_step: self.global_step,
            history: self.history.clone(),
        }
    }

    /// Scheduled temperature of the current epoch.
    pub fn scheduled_temperature(&self) -> f64 {
        let c = &self.config;
        anneal_temperature(self.epoch.min(c.epochs.saturating_sub(1)), c.epochs, c.temperature_start, c.temperature_end)
    }

    /// One optimization step; returns the batch loss.
    pub fn train_step(&mut self, temperature: f64) -> Result<f64> {
        let c = &self.config;
        let step = self.global_step;
        let (sn, sp) = sample_channel_params(&c.channel, &mut substream(c.seed, Stream::ChannelDraw, step));
        let probs = self.model.constellation(sn, sp)?.probs;
        if c.mode.is_probabilistic() {
            let counts = quantize_counts(&probs, c.batch_size);
            if counts.iter().filter(|&&n| n > 0).count() == 1 {
                log::warn!("step {step}: quantized distribution collapsed onto one symbol");
            }
        }
        let input = draw_batch(
            &probs,
            c.label_source(),
            c.batch_size,
            sn,
            sp,
            !c.mode.is_square_qam(),
            c.seed,
            step,
        );
        let out = batch_loss(&self.model, &input, &c.train_recovery(temperature), c.loss_kind(), true)?;
        let grad = out.gradient.expect("gradient requested");
        let mut params = self.model.params();
        adam_step(&mut params, &grad, &mut self.adam, &AdamConfig::with_learning_rate(c.learning_rate))?;
        crate::error::ensure_finite(&params, "parameters after update")?;
        self.model.set_params(&params)?;
        self.global_step += 1;
        Ok(out.loss)
    }

    /// Validation BMI with regular BPS at the validation point.
    pub fn validate(&self) -> Result<BmiEstimate> {
        let c = &self.config;
        let (sn, sp) = c.validation_point();
        evaluate(
            &self.model,
            sn,
            sp,
            c.validation_symbols,
            EvalCpe::Regular,
            c.num_test_phases,
            c.half_window,
            c.seed,
            VALIDATION_INDEX,
        )
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let temperature = self.scheduled_temperature();
        let mut total = 0.0;
        for _ in 0..self.config.batches_per_epoch {
            total += self.train_step(temperature)?;
        }
        let loss = total / self.config.batches_per_epoch as f64;
        let epoch = self.epoch;
        self.epoch += 1;
        let due = self.epoch.is_multiple_of(self.config.validation_interval) || self.epoch == self.config.epochs;
        let validation_bmi = if due { Some(self.validate()?.value) } else { None };
        let (sn, sp) = self.config.validation_point();
        let record = EpochRecord {
            epoch,
            loss,
            validation_bmi,
            entropy: entropy(&self.model.constellation(sn, sp)?.probs),
            temperature: if self.config.trainable_temperature {
                self.model.trained_temperature()
            } else {
                temperature
            },
        };
        log::info!(
            "epoch {epoch}: loss {loss:.5} validation BMI {} t {:.4e}",
            validation_bmi.map_or("-".into(), |v| format!("{v:.4}")),
            record.temperature
        );
        self.history.push(record.clone());
        Ok(record)
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self) -> std::result::Result<(), Diverged> {
        while self.epoch < self.config.epochs {
            let before = self.checkpoint();
            if let Err(cause) = self.run_epoch() {
                let mut checkpoint = before;
                // Keep the steps of the failing epoch that did complete.
                checkpoint.model = self.model.clone();
                checkpoint.adam = self.adam.clone();
                checkpoint.global_step = self.global_step;
                return Err(Diverged {
                    checkpoint: Box::new(checkpoint),
                    cause,
                });
            }
        }
        Ok(())
    }
}

/// Trains from scratch and returns the final checkpoint.
pub fn train(config: &TrainConfig) -> std::result::Result<Checkpoint, TrainError> {
    let mut trainer = Trainer::new(config.clone())?;
    trainer.run()?;
    Ok(trainer.checkpoint())
}

/// Trains the Maxwell-Boltzmann parameter (and demapper) on square QAM.
pub fn train_qam_pcs(config: &TrainConfig) -> std::result::Result<Checkpoint, TrainError> {
    if config.mode != TrainMode::QamPcs {
        return Err(Error::InvalidArgument("train_qam_pcs needs mode qam_pcs".into()).into());
    }
    train(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            bits_per_symbol: 4,
            epochs: 2,
            batches_per_epoch: 2,
            batch_size: 300,
            num_test_phases: 16,
            half_window: 16,
            demapper_hidden: vec![16, 16],
            validation_symbols: 400,
            channel: ChannelRanges::fixed(14.0, 100e3, 32e9),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn anneal_examples() {
        assert_eq!(anneal_temperature(0, 1000, 1.0, 1e-3), 1.0);
        assert!((anneal_temperature(999, 1000, 1.0, 1e-3) - 1e-3).abs() < 1e-15);
        assert!((anneal_temperature(500, 1001, 1.0, 1e-3) - 0.031_622_776).abs() < 1e-8);
        assert_eq!(anneal_temperature(0, 1, 0.5, 1e-3), 0.5);
    }

    #[test]
    fn channel_draws() {
        let fixed = ChannelRanges::fixed(17.0, 100e3, 32e9);
        let mut rng = substream(1, Stream::ChannelDraw, 0);
        let (sn, sp) = sample_channel_params(&fixed, &mut rng);
        assert_eq!(sn, sigma_n_from_snr(17.0, 1.0));
        assert_eq!(sp, sigma_phi_from_linewidth(100e3, 32e9));

        let ranges = ChannelRanges {
            snr_db: Interval { min: 14.0, max: 24.0 },
            linewidth_hz: Interval { min: 50e3, max: 600e3 },
            symbol_rate: 32e9,
        };
        let (rn, rp) = (ranges.sigma_n(), ranges.sigma_phi());
        let n = 100_000;
        let (mut sum_n, mut sum_p) = (0.0, 0.0);
        for i in 0..n {
            let (a, b) = sample_channel_params(&ranges, &mut substream(2, Stream::ChannelDraw, i));
            assert!(rn.contains(a) && rp.contains(b));
            sum_n += a;
            sum_p += b;
        }
        assert!((sum_n / n as f64 / rn.midpoint() - 1.0).abs() < 0.01);
        assert!((sum_p / n as f64 / rp.midpoint() - 1.0).abs() < 0.01);
    }

    #[test]
    fn config_rejects_short_batches() {
        let c = TrainConfig {
            batch_size: 256,
            half_window: 128,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let c = TrainConfig { epochs: 0, ..small() };
        let cp = train(&c).unwrap();
        let fresh = Trainer::new(c).unwrap();
        assert_eq!(cp.model, fresh.model);
        assert!(cp.history.is_empty());
    }

    #[test]
    fn zero_learning_rate_keeps_model() {
        let c = TrainConfig {
            learning_rate: 0.0,
            ..small()
        };
        let mut t = Trainer::new(c).unwrap();
        let before = t.model.clone();
        let loss = t.train_step(0.5).unwrap();
        assert!(loss.is_finite());
        assert_eq!(t.model, before);
    }

    #[test]
    fn identical_seeds_identical_history() {
        let a = train(&small()).unwrap();
        let b = train(&small()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn checkpoint_resume_is_bitwise() {
        let mut t = Trainer::new(TrainConfig {
            mode: TrainMode::Geopcs,
            ..small()
        })
        .unwrap();
        t.train_step(0.3).unwrap();
        let json = t.checkpoint().to_json().unwrap();
        let mut resumed = Trainer::from_checkpoint(Checkpoint::from_json(&json).unwrap()).unwrap();
        let a = t.train_step(0.3).unwrap();
        let b = resumed.train_step(0.3).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(t.model, resumed.model);
        assert_eq!(t.adam, resumed.adam);
    }

    #[test]
    fn trainable_temperature_stays_in_unit_interval() {
        let c = TrainConfig {
            trainable_temperature: true,
            learning_rate: 0.05,
            ..small()
        };
        let cp = train(&c).unwrap();
        for r in &cp.history {
            assert!(r.temperature > 0.0 && r.temperature < 1.0);
        }
    }

    #[test]
    fn evaluation_is_reproducible_and_genie_is_no_worse() {
        let t = Trainer::new(small()).unwrap();
        let (sn, sp) = t.config.validation_point();
        let run = |cpe| evaluate(&t.model, sn, sp, 2000, cpe, 16, 16, 3, EVALUATION_INDEX).unwrap();
        assert_eq!(run(EvalCpe::Regular), run(EvalCpe::Regular));
        let _ = run(EvalCpe::Genie);
    }
}
