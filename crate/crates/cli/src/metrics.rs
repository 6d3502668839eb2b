//! JSON-lines metric records. Every line carries the same keys.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricLine {
    pub command: String,
    pub metric: String,
    /// Item the value refers to (file, parameter, prompt), if any.
    pub label: Option<String>,
    pub step: Option<u64>,
    pub value: f64,
}

pub struct Emitter<'a> {
    command: &'static str,
    out: &'a mut dyn Write,
}

impl<'a> Emitter<'a> {
    pub fn new(command: &'static str, out: &'a mut dyn Write) -> Self {
        Self { command, out }
    }

    pub fn emit(&mut self, metric: &str, step: Option<u64>, value: f64) -> Result<()> {
        self.write(metric, None, step, value)
    }

    pub fn emit_labeled(&mut self, metric: &str, label: &str, value: f64) -> Result<()> {
        self.write(metric, Some(label.to_string()), None, value)
    }

    fn write(&mut self, metric: &str, label: Option<String>, step: Option<u64>, value: f64) -> Result<()> {
        let line = MetricLine { command: self.command.to_string(), metric: metric.to_string(), label, step, value };
        let json = serde_json::to_string(&line).expect("metric line serialises");
        writeln!(self.out, "{json}")?;
        Ok(())
    }
}

/// Parses the metric lines of a command's output, skipping anything else.
pub fn parse_lines(text: &str) -> Vec<MetricLine> {
    text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect()
}
