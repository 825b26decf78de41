//! Experiment configuration files.

use std::path::{Path, PathBuf};

use cshape::trainer::{ChannelRanges, Interval, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// A fixed value or a `[min, max]` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RangeValue {
    Fixed(f64),
    Span([f64; 2]),
}

impl RangeValue {
    fn interval(self) -> Interval {
        match self {
            RangeValue::Fixed(v) => Interval::fixed(v),
            RangeValue::Span([min, max]) => Interval { min, max },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpsSection {
    pub num_test_phases: usize,
    pub half_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureSection {
    pub start: f64,
    pub end: f64,
    pub trainable: bool,
    pub initial_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub snr_db: RangeValue,
    pub linewidth_hz: RangeValue,
    pub symbol_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapingSection {
    pub symmetry: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub demapper_hidden: Vec<usize>,
    pub mapper_hidden: usize,
    pub shaper_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationSection {
    pub symbols: usize,
    pub interval: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpeChoice {
    Regular,
    Soft,
    Genie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Checkpoint to evaluate; defaults to `<out>/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
    /// Grid axes. Both empty means the training validation point.
    pub snr_db: Vec<f64>,
    pub linewidth_hz: Vec<f64>,
    pub symbols: usize,
    pub cpe: CpeChoice,
    /// Soft BPS temperature; defaults to the learned one, else `temperature.end`.
    pub soft_temperature: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionsSection {
    pub resolution: usize,
    pub half_width: f64,
    /// 1-based bit indices; empty means all.
    pub bits: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareMode {
    /// Annealed soft BPS in training, regular BPS in validation.
    Regular,
    /// Learned temperature in training and soft BPS at that temperature in validation.
    Trainable,
}

impl CompareMode {
    pub fn name(self) -> &'static str {
        match self {
            CompareMode::Regular => "regular",
            CompareMode::Trainable => "trainable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub num_test_phases: Vec<usize>,
    pub modes: Vec<CompareMode>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub bits_per_symbol: usize,
    pub batch_size: usize,
    pub num_test_phases: usize,
    pub half_window: usize,
    pub temperatures: Vec<f64>,
    pub demapper_hidden: Vec<usize>,
    pub rel_step: f64,
    pub tolerance: f64,
    pub snr_db: f64,
    pub linewidth_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: TrainMode,
    pub bits_per_symbol: usize,
    pub parameterized: bool,
    pub seed: u64,
    pub train: TrainSection,
    pub bps: BpsSection,
    pub temperature: TemperatureSection,
    pub channel: ChannelSection,
    pub shaping: ShapingSection,
    pub network: NetworkSection,
    pub validation: ValidationSection,
    pub eval: EvalSection,
    pub regions: RegionsSection,
    pub compare: CompareSection,
    pub gradcheck: GradcheckSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: t.mode,
            bits_per_symbol: t.bits_per_symbol,
            parameterized: t.parameterized,
            seed: t.seed,
            train: TrainSection {
                epochs: t.epochs,
                batches_per_epoch: t.batches_per_epoch,
                batch_size: t.batch_size,
                learning_rate: t.learning_rate,
            },
            bps: BpsSection {
                num_test_phases: t.num_test_phases,
                half_window: t.half_window,
            },
            temperature: TemperatureSection {
                start: t.temperature_start,
                end: t.temperature_end,
                trainable: t.trainable_temperature,
                initial_raw: t.initial_raw_temperature,
            },
            channel: ChannelSection {
                snr_db: RangeValue::Fixed(t.channel.snr_db.min),
                linewidth_hz: RangeValue::Fixed(t.channel.linewidth_hz.min),
                symbol_rate: t.channel.symbol_rate,
            },
            shaping: ShapingSection { symmetry: t.symmetry },
            network: NetworkSection {
                demapper_hidden: t.demapper_hidden,
                mapper_hidden: t.mapper_hidden,
                shaper_hidden: t.shaper_hidden,
            },
            validation: ValidationSection {
                symbols: t.validation_symbols,
                interval: t.validation_interval,
            },
            eval: EvalSection::default(),
            regions: RegionsSection::default(),
            compare: CompareSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

macro_rules! section_default {
    ($ty:ty, $value:expr) => {
        impl Default for $ty {
            fn default() -> Self {
                $value
            }
        }
    };
}

section_default!(TrainSection, ExperimentConfig::default().train);
section_default!(BpsSection, ExperimentConfig::default().bps);
section_default!(TemperatureSection, ExperimentConfig::default().temperature);
section_default!(ChannelSection, ExperimentConfig::default().channel);
section_default!(ShapingSection, ExperimentConfig::default().shaping);
section_default!(NetworkSection, ExperimentConfig::default().network);
section_default!(ValidationSection, ExperimentConfig::default().validation);
section_default!(
    EvalSection,
    EvalSection {
        checkpoint: None,
        snr_db: Vec::new(),
        linewidth_hz: Vec::new(),
        symbols: 100_000,
        cpe: CpeChoice::Regular,
        soft_temperature: None,
    }
);
section_default!(
    RegionsSection,
    RegionsSection {
        resolution: 200,
        half_width: 1.6,
        bits: Vec::new(),
    }
);
section_default!(
    CompareSection,
    CompareSection {
        num_test_phases: vec![30, 60],
        modes: vec![CompareMode::Regular, CompareMode::Trainable],
        seeds: vec![1, 2, 3],
    }
);
section_default!(
    GradcheckSection,
    GradcheckSection {
        bits_per_symbol: 4,
        batch_size: 256,
        num_test_phases: 16,
        half_window: 16,
        temperatures: vec![1.0, 0.1, 0.001],
        demapper_hidden: vec![32, 32],
        rel_step: 1e-7,
        tolerance: 1e-3,
        snr_db: 14.0,
        linewidth_hz: 100e3,
    }
);

impl ExperimentConfig {
    /// Parses and validates a configuration document.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.check(Some(text))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            parameterized: self.parameterized,
            bits_per_symbol: self.bits_per_symbol,
            epochs: self.train.epochs,
            batches_per_epoch: self.train.batches_per_epoch,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            num_test_phases: self.bps.num_test_phases,
            half_window: self.bps.half_window,
            temperature_start: self.temperature.start,
            temperature_end: self.temperature.end,
            trainable_temperature: self.temperature.trainable,
            initial_raw_temperature: self.temperature.initial_raw,
            channel: ChannelRanges {
                snr_db: self.channel.snr_db.interval(),
                linewidth_hz: self.channel.linewidth_hz.interval(),
                symbol_rate: self.channel.symbol_rate,
            },
            seed: self.seed,
            symmetry: self.shaping.symmetry,
            demapper_hidden: self.network.demapper_hidden.clone(),
            mapper_hidden: self.network.mapper_hidden,
            shaper_hidden: self.network.shaper_hidden,
            validation_symbols: self.validation.symbols,
            validation_interval: self.validation.interval,
        }
    }

    /// Validates the resolved configuration; `text` anchors messages to lines.
    pub fn check(&self, text: Option<&str>) -> Result<(), CliError> {
        let at = |key: &str, msg: String| {
            let line = text.and_then(|t| line_of(t, key));
            CliError::Config(match line {
                Some(n) => format!("line {n}: {msg}"),
                None => msg,
            })
        };
        let t = self.train_config();
        if t.batch_size <= 2 * t.half_window {
            return Err(at(
                "train.batch_size",
                format!(
                    "train.batch_size = {} must be larger than 2 * bps.half_window = {}; \
                     raise train.batch_size or lower bps.half_window",
                    t.batch_size,
                    2 * t.half_window
                ),
            ));
        }
        if t.validation_symbols <= 2 * t.half_window {
            return Err(at(
                "validation.symbols",
                format!(
                    "validation.symbols = {} must be larger than 2 * bps.half_window = {}",
                    t.validation_symbols,
                    2 * t.half_window
                ),
            ));
        }
        if let Err(e) = t.validate() {
            return Err(CliError::Config(e.to_string()));
        }
        if self.eval.symbols <= 2 * t.half_window {
            return Err(at(
                "eval.symbols",
                format!(
                    "eval.symbols = {} must be larger than 2 * bps.half_window = {}",
                    self.eval.symbols,
                    2 * t.half_window
                ),
            ));
        }
        if self.eval.snr_db.is_empty() != self.eval.linewidth_hz.is_empty() {
            return Err(at(
                "eval.snr_db",
                "eval.snr_db and eval.linewidth_hz must both be set or both be empty".into(),
            ));
        }
        if let Some(t) = self.eval.soft_temperature {
            if !(t > 0.0 && t <= 1.0) {
                return Err(at("eval.soft_temperature", format!("eval.soft_temperature must lie in (0, 1], got {t}")));
            }
        }
        if self.regions.resolution < 2 || !(self.regions.half_width > 0.0) {
            return Err(at(
                "regions.resolution",
                "regions.resolution must be at least 2 and regions.half_width positive".into(),
            ));
        }
        if let Some(&b) = self.regions.bits.iter().find(|&&b| b == 0 || b > self.bits_per_symbol) {
            return Err(at(
                "regions.bits",
                format!("regions.bits entries must lie in [1, {}], got {b}", self.bits_per_symbol),
            ));
        }
        let c = &self.compare;
        if c.num_test_phases.iter().any(|&l| l < 2) || c.modes.is_empty() || c.seeds.is_empty() {
            return Err(at(
                "compare.num_test_phases",
                "compare needs test phase counts of at least 2, one mode and one seed".into(),
            ));
        }
        let g = &self.gradcheck;
        if g.batch_size <= 2 * g.half_window || g.num_test_phases < 2 || g.bits_per_symbol == 0 {
            return Err(at(
                "gradcheck.batch_size",
                format!(
                    "gradcheck.batch_size = {} must be larger than 2 * gradcheck.half_window = {}",
                    g.batch_size,
                    2 * g.half_window
                ),
            ));
        }
        if g.temperatures.iter().any(|&t| !(t > 0.0 && t <= 1.0)) || !(g.rel_step > 0.0) || !(g.tolerance > 0.0) {
            return Err(at(
                "gradcheck.temperatures",
                "gradcheck temperatures must lie in (0, 1]; rel_step and tolerance must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Short hash of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("configuration serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// 1-based line that sets the dotted `key`, either directly or inside its table.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let (section, leaf) = key.rsplit_once('.').unwrap_or(("", key));
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.starts_with('[') && line.ends_with(']') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            continue;
        }
        let Some((k, _)) = line.split_once('=') else { continue };
        let k = k.trim();
        let full = if current.is_empty() {
            k.to_string()
        } else {
            format!("{current}.{k}")
        };
        if full == key || (current == section && k == leaf) {
            return Some(i + 1);
        }
    }
    None
}
