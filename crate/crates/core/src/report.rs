//! CSV tables with a JSON metadata sidecar.
//!
//! Numbers are written with 17 significant digits so that a table read back
//! reproduces every value bit for bit, and two runs can be compared by
//! bytes.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Round-trip formatting: `{:.16e}` for finite values, `NaN`/`inf` otherwise.
pub fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// Hex SHA-256 of a serializable value's JSON form.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let doc = serde_json::to_vec(value).expect("value serializes");
    hex::encode(Sha256::digest(&doc))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

/// Contents of `<table>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableMeta {
    pub seed: u64,
    pub config_hash: String,
    pub rows: usize,
    pub columns: Vec<String>,
    pub generator: String,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width must match header");
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    /// Cell `(row, column name)`.
    pub fn get(&self, row: usize, column: &str) -> Option<&str> {
        let c = self.header.iter().position(|h| h == column)?;
        self.rows.get(row).map(|r| r[c].as_str())
    }

    pub fn column_f64(&self, column: &str) -> Vec<f64> {
        (0..self.len())
            .filter_map(|r| self.get(r, column).and_then(|s| s.parse().ok()))
            .collect()
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }

    /// Writes the table and its sidecar; returns the sidecar path.
    pub fn write(&self, path: &Path, seed: u64, config_hash: &str) -> Result<PathBuf> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        let meta = TableMeta {
            seed,
            config_hash: config_hash.to_string(),
            rows: self.len(),
            columns: self.header.clone(),
            generator: concat!("anticonc ", env!("CARGO_PKG_VERSION")).to_string(),
        };
        let side = meta_path(path);
        serde_json::to_writer_pretty(File::create(&side)?, &meta)?;
        Ok(side)
    }
}

/// `out/levy.csv` -> `out/levy.csv.meta.json`
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1e300, 0.0] {
            let s = fmt_num(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(fmt_num(f64::NAN), "NaN");
        assert_eq!(fmt_num(0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn write_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = CsvTable::new(&["a", "b"]);
        t.push(vec![fmt_num(1.0), "x".into()]);
        let path = dir.path().join("t.csv");
        let side = t.write(&path, 9, "abc").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), t.to_csv_string());
        let meta: serde_json::Value = serde_json::from_reader(File::open(side).unwrap()).unwrap();
        assert_eq!(meta["seed"], 9);
        assert_eq!(meta["config_hash"], "abc");
        assert_eq!(t.column_f64("a"), vec![1.0]);
        assert_eq!(t.get(0, "b"), Some("x"));
    }
}
