//! CSV and JSON writers.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::CliError;

/// Provenance comment that starts every CSV file.
pub fn provenance(config: &ExperimentConfig) -> String {
    format!(
        "# cshape {} config={} seed={}\n",
        env!("CARGO_PKG_VERSION"),
        config.hash(),
        config.seed
    )
}

/// CSV document with a provenance comment and a header row.
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(config: &ExperimentConfig, header: &[&str]) -> Self {
        let mut text = provenance(config);
        text.push_str(&header.join(","));
        text.push('\n');
        Self { text }
    }

    /// Appends raw text (already newline-terminated lines).
    pub fn raw(&mut self, body: &str) {
        self.text.push_str(body);
    }

    pub fn row(&mut self, fields: &[String]) {
        let _ = writeln!(self.text, "{}", fields.join(","));
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_file(path, &self.text)
    }
}

pub fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Shortest representation that round-trips.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}
