//! Line-delimited metric records: `kind=train label=cartesian step=3 lm=4.1 ...`.
//!
//! Field names and labels never contain spaces or `=`; values print with
//! Rust's shortest round-trip float formatting, so parsing restores them
//! exactly.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// Record family, e.g. `train`, `eval`, `robustness`.
    pub kind: String,
    /// Free-form run label such as the variant name.
    pub label: String,
    pub step: u64,
    pub values: Vec<(String, f64)>,
}

impl MetricsRecord {
    pub fn new(kind: impl Into<String>, label: impl Into<String>, step: u64) -> Self {
        Self { kind: kind.into(), label: label.into(), step, values: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64) -> &mut Self {
        self.values.push((name.into(), value));
        self
    }

    pub fn with(mut self, name: impl Into<String>, value: f64) -> Self {
        self.push(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// Values whose names start with `prefix`, in insertion order.
    pub fn prefixed<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, f64)> + 'a {
        self.values.iter().filter(move |(n, _)| n.starts_with(prefix)).map(|(n, v)| (n.as_str(), *v))
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = |msg: String| Error::Corrupt(format!("metrics line {line:?}: {msg}"));
        let mut kind = None;
        let mut label = String::new();
        let mut step = None;
        let mut values = Vec::new();
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad(format!("field {field:?} lacks '='")))?;
            match k {
                "kind" => kind = Some(v.to_string()),
                "label" => label = v.to_string(),
                "step" => step = Some(v.parse().map_err(|_| bad(format!("step {v:?}")))?),
                _ => values.push((k.to_string(), v.parse().map_err(|_| bad(format!("value {v:?} of {k}")))?)),
            }
        }
        Ok(Self {
            kind: kind.ok_or_else(|| bad("missing kind".into()))?,
            label,
            step: step.ok_or_else(|| bad("missing step".into()))?,
            values,
        })
    }
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "kind={}", self.kind)?;
        if !self.label.is_empty() {
            write!(f, " label={}", self.label)?;
        }
        write!(f, " step={}", self.step)?;
        for (k, v) in &self.values {
            write!(f, " {k}={v:?}")?;
        }
        Ok(())
    }
}

/// Append-only writer of metric lines.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{record}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(MetricsRecord::parse(&line)?);
        }
    }
    Ok(out)
}
