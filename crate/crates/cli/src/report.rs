use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::ValueEnum;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

/// Bumped whenever a report field is added, removed or renamed.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn digest(path: &Path) -> io::Result<InputDigest> {
    let mut hasher = Sha256::new();
    let bytes = io::copy(&mut File::open(path)?, &mut hasher)?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hex::encode(hasher.finalize()),
        bytes,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub inputs: Vec<InputDigest>,
    pub rows: Vec<Map<String, Value>>,
    pub summary: Option<Value>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        Report {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            inputs: Vec::new(),
            rows: Vec::new(),
            summary: None,
            warnings: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> anyhow::Result<()> {
        let d = digest(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(d);
        Ok(())
    }

    /// Appends a record; it must serialize to a JSON object.
    pub fn push_row(&mut self, row: impl Serialize) {
        match serde_json::to_value(row).expect("row serializes") {
            Value::Object(map) => self.rows.push(map),
            other => panic!("row is not an object: {other}"),
        }
    }

    pub fn set_summary(&mut self, summary: impl Serialize) {
        self.summary = Some(serde_json::to_value(summary).expect("summary serializes"));
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        let message = message.into();
        eprintln!("warning: {message}");
        self.warnings.push(message);
    }

    /// Column names in order of first appearance.
    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = Vec::new();
        for row in &self.rows {
            for k in row.keys() {
                if !cols.iter().any(|c| c == k) {
                    cols.push(k.clone());
                }
            }
        }
        cols
    }

    pub fn write_json(&self, mut w: impl Write) -> anyhow::Result<()> {
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }

    /// Rows only; nested values are written as compact JSON.
    pub fn write_csv(&self, w: impl Write) -> anyhow::Result<()> {
        let cols = self.columns();
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&cols)?;
        for row in &self.rows {
            out.write_record(cols.iter().map(|c| cell(row.get(c))))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn emit(&self, format: Format, out: Option<&PathBuf>) -> anyhow::Result<()> {
        let sink: Box<dyn Write> = match out {
            Some(path) => Box::new(BufWriter::new(
                File::create(path).with_context(|| format!("creating {}", path.display()))?,
            )),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        };
        match format {
            Format::Json => self.write_json(sink),
            Format::Csv => self.write_csv(sink),
        }
    }
}

fn cell(v: Option<&Value>) -> String {
    match v {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Bool(b)) => b.to_string(),
        Some(Value::Number(n)) => n.to_string(),
        Some(other) => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn csv_union_of_columns_and_quoting() {
        let mut r = Report::new("t");
        r.push_row(json!({"a": 1, "b": "x,y"}));
        r.push_row(json!({"a": null, "c": [1, 2]}));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "a,b,c\n1,\"x,y\",\n,,\"[1,2]\"\n");
    }

    #[test]
    fn digest_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f");
        std::fs::write(&p, b"abc").unwrap();
        let d = digest(&p).unwrap();
        assert_eq!(d.sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(d.bytes, 3);
    }
}
