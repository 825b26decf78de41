//! Constellation export format.

use cshape::shaping::hex_label;
use cshape::{Complex64, Constellation};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const LABEL_CONVENTION: &str = "MSB-first";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportedPoint {
    pub index: usize,
    pub hex_label: String,
    pub re: f64,
    pub im: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstellationExport {
    pub m: usize,
    pub convention: String,
    /// Number of most significant label bits with forced uniform marginals.
    pub symmetric_bits: usize,
    pub sigma_n: f64,
    pub sigma_phi: f64,
    pub points: Vec<ExportedPoint>,
}

impl ConstellationExport {
    pub fn new(c: &Constellation, symmetric_bits: usize, sigma_n: f64, sigma_phi: f64) -> Self {
        let m = c.bits_per_symbol;
        let points = c
            .points
            .iter()
            .zip(&c.probs)
            .enumerate()
            .map(|(index, (p, &prob))| ExportedPoint {
                index,
                hex_label: hex_label(index, m),
                re: p.re,
                im: p.im,
                prob,
            })
            .collect();
        Self {
            m,
            convention: LABEL_CONVENTION.into(),
            symmetric_bits,
            sigma_n,
            sigma_phi,
            points,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("export serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("constellation file: {e}")))
    }

    /// Rebuilds the constellation, checking order, labels and convention.
    pub fn constellation(&self) -> Result<Constellation, CliError> {
        if self.convention != LABEL_CONVENTION {
            return Err(CliError::Config(format!("unsupported label convention {:?}", self.convention)));
        }
        if self.points.len() != 1 << self.m {
            return Err(CliError::Config(format!(
                "expected {} points for m = {}, found {}",
                1usize << self.m,
                self.m,
                self.points.len()
            )));
        }
        for (i, p) in self.points.iter().enumerate() {
            if p.index != i || p.hex_label != hex_label(i, self.m) {
                return Err(CliError::Config(format!("point {i} is out of order or mislabeled")));
            }
        }
        let points = self.points.iter().map(|p| Complex64::new(p.re, p.im)).collect();
        let probs = self.points.iter().map(|p| p.prob).collect();
        Ok(Constellation::new(points, probs)?)
    }
}
