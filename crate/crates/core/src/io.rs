//! File formats: numeric CSV with a header row, JSON documents and run
//! manifests.
//!
//! Floats are written with 17 significant digits so every value round-trips
//! exactly and reruns are byte-comparable.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes a CSV whose rows are `time, block_1 row, block_2 row, …`. All
/// blocks must have one row per time.
pub fn write_series_csv(path: &Path, header: &[String], times: &[f64], blocks: &[ArrayView2<'_, f64>]) -> Result<()> {
    let ncols: usize = 1 + blocks.iter().map(|b| b.ncols()).sum::<usize>();
    if header.len() != ncols || blocks.iter().any(|b| b.nrows() != times.len()) {
        return Err(Error::Format {
            path: path.into(),
            reason: "header or block shapes disagree with the time column".into(),
        });
    }
    let mut rows = Vec::with_capacity(times.len());
    for (i, t) in times.iter().enumerate() {
        let mut row = vec![fmt_f64(*t)];
        for b in blocks {
            row.extend(b.row(i).iter().map(|&v| fmt_f64(v)));
        }
        rows.push(row);
    }
    write_csv(path, header, &rows)
}

/// Writes a CSV with a header and pre-formatted cells.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for row in rows {
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Numeric CSV contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    /// `[rows × columns]`, including the first (time) column.
    pub data: Array2<f64>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.data.column(j).to_vec())
    }

    /// Columns whose names start with `prefix` followed by a number, in file
    /// order.
    pub fn block(&self, prefix: &str) -> Array2<f64> {
        let idx: Vec<usize> = self
            .header
            .iter()
            .enumerate()
            .filter(|(_, h)| {
                h.strip_prefix(prefix)
                    .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
            })
            .map(|(j, _)| j)
            .collect();
        self.data.select(ndarray::Axis(1), &idx)
    }
}

pub fn read_csv(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.into(),
        reason,
    };
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .split(',')
        .map(str::to_owned)
        .collect();
    let mut values = Vec::new();
    let mut nrows = 0;
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let before = values.len();
        for cell in line.split(',') {
            values.push(
                cell.trim()
                    .parse::<f64>()
                    .map_err(|_| bad(format!("row {}: cannot parse `{cell}`", i + 2)))?,
            );
        }
        if values.len() - before != header.len() {
            return Err(bad(format!("row {} has {} cells, header has {}", i + 2, values.len() - before, header.len())));
        }
        nrows += 1;
    }
    let data = Array2::from_shape_vec((nrows, header.len()), values).map_err(|e| bad(e.to_string()))?;
    Ok(Table { header, data })
}

/// `["t", "X1", …, "XK"]`-style header.
pub fn series_header(prefixes: &[&str], k: usize) -> Vec<String> {
    let mut h = vec!["t".to_owned()];
    for p in prefixes {
        h.extend((1..=k).map(|i| format!("{p}{i}")));
    }
    h
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.into(),
        reason: e.to_string(),
    })
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub crate_version: String,
    /// SHA-256 of the canonical JSON of the configuration used.
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Full configuration, so the command can be rerun from this file.
    pub config: serde_json::Value,
    /// Command-line arguments that are not part of the configuration.
    #[serde(default)]
    pub args: BTreeMap<String, String>,
    /// SHA-256 of every input file, by file name.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every output file, by file name.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config_hash: String, seeds: BTreeMap<String, u64>, config: serde_json::Value) -> Self {
        Self {
            command: command.to_owned(),
            crate_version: env!("CARGO_PKG_VERSION").to_owned(),
            config_hash,
            seeds,
            config,
            args: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(file_name(path), file_sha256(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(file_name(path), file_sha256(path)?);
        Ok(())
    }

    /// Writes `manifest.<command>.json` in `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("manifest.{}.json", self.command));
        write_json(&path, self)?;
        Ok(path)
    }
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, -1.0 / 3.0, 1e-300, 12345.678901234567, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let x = array![[1.0, 2.5], [-0.1, 1e-9]];
        let c = array![[7.0, 8.0], [9.0, 10.0]];
        write_series_csv(&p, &series_header(&["X", "C"], 2), &[0.0, 0.01], &[x.view(), c.view()]).unwrap();
        let t = read_csv(&p).unwrap();
        assert_eq!(t.header, ["t", "X1", "X2", "C1", "C2"]);
        assert_eq!(t.block("X"), x);
        assert_eq!(t.block("C"), c);
        assert_eq!(t.column("t").unwrap(), vec![0.0, 0.01]);
    }

    #[test]
    fn malformed_csv_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        fs::write(&p, "t,X1\n0.0,abc\n").unwrap();
        assert!(matches!(read_csv(&p), Err(Error::Format { .. })));
        assert!(matches!(read_csv(&dir.path().join("missing.csv")), Err(Error::Io { .. })));
    }
}
