//! Report emission: run manifests, rounding of emitted numbers, output sinks.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use proper_uq::numeric::round_sig;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Significant digits kept in every emitted number.
pub const DIGITS: usize = 12;

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub flags: Value,
    pub seed: Option<u64>,
    pub version: String,
    pub inputs: Vec<InputDigest>,
    pub wall_time_s: f64,
}

/// Collects input digests while a subcommand runs.
pub struct Run {
    subcommand: &'static str,
    flags: Value,
    seed: Option<u64>,
    inputs: Vec<InputDigest>,
    started: Instant,
}

impl Run {
    pub fn new<F: Serialize>(subcommand: &'static str, flags: &F, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            subcommand,
            flags: serde_json::to_value(flags)?,
            seed,
            inputs: Vec::new(),
            started: Instant::now(),
        })
    }

    /// Records the SHA-256 of an input file and returns its path.
    pub fn input<'a>(&mut self, path: &'a Path) -> Result<&'a Path> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(path)
    }

    fn manifest(&self) -> RunManifest {
        RunManifest {
            subcommand: self.subcommand.to_string(),
            flags: self.flags.clone(),
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: self.inputs.iter().map(|d| InputDigest { path: d.path.clone(), sha256: d.sha256.clone() }).collect(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
        }
    }

    /// Serializes `report`, rounds its numbers and attaches the manifest.
    pub fn json_report<T: Serialize>(&self, report: &T) -> Result<Value> {
        let mut value = serde_json::to_value(report)?;
        round_numbers(&mut value);
        let manifest = serde_json::to_value(self.manifest())?;
        match &mut value {
            Value::Object(map) => {
                map.insert("manifest".into(), manifest);
            }
            other => {
                value = json!({ "result": other.take(), "manifest": manifest });
            }
        }
        Ok(value)
    }
}

/// Rounds every float in a JSON tree to [`DIGITS`] significant digits.
pub fn round_numbers(value: &mut Value) {
    match value {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64 number");
            if let Some(r) = serde_json::Number::from_f64(round_sig(x, DIGITS)) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_numbers),
        Value::Object(map) => map.values_mut().for_each(round_numbers),
        _ => {}
    }
}

/// Formats a float for CSV output with the same rounding as JSON reports.
pub fn fmt_num(x: f64) -> String {
    format!("{:?}", round_sig(x, DIGITS))
}

/// Destination of a report: a file or stdout.
pub struct Sink(Option<PathBuf>);

impl Sink {
    pub fn new(out: Option<PathBuf>) -> Self {
        Self(out)
    }

    pub fn write_text(&self, text: &str) -> Result<()> {
        match &self.0 {
            Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
            None => {
                let mut out = io::stdout().lock();
                out.write_all(text.as_bytes())?;
                out.flush()?;
                Ok(())
            }
        }
    }

    pub fn write_json(&self, value: &Value) -> Result<()> {
        self.write_text(&(serde_json::to_string_pretty(value)? + "\n"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_walks_the_tree() {
        let mut v = json!({"a": 0.1234567890123456, "b": [1.0000000000001, 3], "c": {"d": -2.5e-20}});
        round_numbers(&mut v);
        assert_eq!(v["a"], json!(0.123456789012));
        assert_eq!(v["b"][0], json!(1.0));
        assert_eq!(v["b"][1], json!(3));
        assert_eq!(v["c"]["d"], json!(-2.5e-20));
    }

    #[test]
    fn csv_numbers_round_trip() {
        assert_eq!(fmt_num(0.1 + 0.2), "0.3");
        assert_eq!(fmt_num(2.0), "2.0");
    }
}
