//! Report envelope and output formats.

use std::fmt::Write as _;

use serde::Serialize;
use serde_json::{json, Value};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Text,
    Json,
    Csv,
}

/// Echo of the input: file, geometry summary and normalized operator.
#[derive(Debug, Clone, Serialize)]
pub struct InputEcho {
    pub file: String,
    pub geometry: String,
    pub class: String,
    pub operator: Option<String>,
    pub order: Option<u32>,
    pub size: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub command: &'static str,
    pub input: InputEcho,
    pub payload: Value,
    pub text: String,
    pub csv: String,
    /// Some verdict or block came out Indeterminate.
    pub indeterminate: bool,
    /// Certified engine/oracle disagreements.
    pub disagreements: usize,
    pub timing_ms: u128,
}

impl Report {
    /// The JSON envelope. Objects are emitted with sorted keys, so equal
    /// reports serialize to equal bytes apart from `timing_ms`.
    pub fn to_json(&self) -> Value {
        json!({
            "schema_version": SCHEMA_VERSION,
            "tool": "fredholm-lab",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "input": self.input,
            "payload": self.payload,
            "status": {
                "indeterminate": self.indeterminate,
                "disagreements": self.disagreements,
            },
            "timing_ms": self.timing_ms as u64,
        })
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => {
                let mut s = serde_json::to_string_pretty(&self.to_json()).expect("report is valid JSON");
                s.push('\n');
                s
            }
            Format::Csv => self.csv.clone(),
            Format::Text => {
                let mut s = String::new();
                let _ = writeln!(s, "fredholm-lab {} :: {}", self.command, self.input.file);
                let _ = writeln!(s, "geometry: {} ({})", self.input.geometry, self.input.class);
                if let Some(op) = &self.input.operator {
                    let _ = writeln!(s, "operator: {op}");
                }
                s.push('\n');
                s.push_str(&self.text);
                s
            }
        }
    }
}

/// Quotes a CSV field when needed.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn csv_row(fields: &[String]) -> String {
    let mut line: String = fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(",");
    line.push('\n');
    line
}

/// Fixed-precision float for text and CSV output.
pub fn num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v:.9}")
    }
}

pub fn complex(z: [f64; 2]) -> String {
    if z[1] == 0.0 {
        num(z[0])
    } else {
        format!("{}{}{}i", num(z[0]), if z[1] < 0.0 { "-" } else { "+" }, num(z[1].abs()))
    }
}
