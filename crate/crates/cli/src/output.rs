// SPDX-License-Identifier: MIT OR Apache-2.0

//! Report files. Every file opens with a `# pie ...` provenance line that
//! readers skip.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use pie_core::{FeatureId, UniqueFeatureSet};

pub fn header(command: &str, hash: &str) -> String {
    format!("# pie {command} config_hash={hash}\n")
}

/// Fixed-precision float for CSV cells; empty for undefined values.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        let s = format!("{x:.9}");
        // no "-0.000000000"
        if s.chars().all(|c| matches!(c, '-' | '0' | '.')) {
            s.trim_start_matches('-').to_string()
        } else {
            s
        }
    }
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub struct Table {
    buf: Vec<u8>,
}

impl Table {
    pub fn new(command: &str, hash: &str, notes: &[String], columns: &[&str]) -> anyhow::Result<Self> {
        let mut buf = header(command, hash).into_bytes();
        for n in notes {
            buf.extend_from_slice(format!("# {n}\n").as_bytes());
        }
        let mut t = Self { buf };
        t.row(columns.iter().map(|c| c.to_string()))?;
        Ok(t)
    }

    pub fn row(&mut self, cells: impl IntoIterator<Item = String>) -> anyhow::Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(cells.into_iter().collect::<Vec<_>>())?;
        self.buf.extend(w.into_inner()?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        fs::write(path, &self.buf).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, command: &str, hash: &str, rows: impl IntoIterator<Item = T>) -> anyhow::Result<()> {
    let mut out = header(command, hash);
    for r in rows {
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let f = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        rows.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(rows)
}

/// One line of the union file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnionRow {
    #[serde(flatten)]
    pub feature: FeatureId,
    /// Occurrences of the feature across all retained circuits.
    pub count: usize,
}

pub fn union_rows(set: &UniqueFeatureSet) -> Vec<UnionRow> {
    set.counts.iter().map(|(&feature, &count)| UnionRow { feature, count }).collect()
}
