//! Files consumed by downstream plotting: the metrics CSV, line-delimited
//! flow trajectory dumps, quantile and histogram tables, and the velocity
//! grid.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Metrics CSV columns, in order.
pub const METRICS_HEADER: &[&str] = &[
    "kind",
    "iteration",
    "update",
    "udcfm",
    "bcfm",
    "cons",
    "risk",
    "shape",
    "total",
    "mean_w_conf",
    "mean_scalar_adv",
    "clean_eval_return",
    "noisy_train_return",
    "wall_time",
];

/// One metrics line. `kind` is `update` for critic updates and `eval` for
/// evaluations; fields that do not apply are left empty.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricsRow {
    pub kind: &'static str,
    pub iteration: usize,
    pub update: usize,
    pub udcfm: Option<f64>,
    pub bcfm: Option<f64>,
    pub cons: Option<f64>,
    pub risk: Option<f64>,
    pub shape: Option<f64>,
    pub total: Option<f64>,
    pub mean_w_conf: Option<f64>,
    pub mean_scalar_adv: Option<f64>,
    pub clean_eval_return: Option<f64>,
    pub noisy_train_return: Option<f64>,
    pub wall_time: f64,
}

pub struct MetricsWriter {
    inner: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    /// Create (truncating) and write the header.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        inner.write_record(METRICS_HEADER).map_err(|e| csv_err(path, e))?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
        })
    }

    /// Continue an existing file after cutting it to `len` bytes, dropping
    /// rows written after the point being resumed from.
    pub fn resume(path: &Path, len: u64) -> Result<Self> {
        let file = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
        file.set_len(len).map_err(|e| Error::io(path, e))?;
        let mut file = file;
        use std::io::Seek;
        file.seek(std::io::SeekFrom::End(0)).map_err(|e| Error::io(path, e))?;
        let inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        Ok(Self {
            inner,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row).map_err(|e| csv_err(&self.path, e))
    }

    /// Flush and return the file length in bytes.
    pub fn flush(&mut self) -> Result<u64> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))?;
        let len = self.inner.get_ref().metadata().map_err(|e| Error::io(&self.path, e))?.len();
        Ok(len)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// One point of an exported flow trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct FlowRecord {
    pub state: usize,
    pub k: usize,
    pub t: f64,
    pub z: f64,
    pub v: f64,
}

/// One JSON object per line.
pub fn write_flow_dump(path: &Path, records: &[FlowRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Columns `k,tau,value` with midpoint levels.
pub fn write_quantiles_csv(path: &Path, supports: &[f64]) -> Result<()> {
    let n = supports.len() as f64;
    let rows: Vec<(usize, f64, f64)> = supports
        .iter()
        .enumerate()
        .map(|(i, &v)| (i + 1, (i as f64 + 0.5) / n, v))
        .collect();
    write_csv(path, &["k", "tau", "value"], &rows)
}

/// Equal-width histogram of the supports. Columns `bin_lo,bin_hi,count`.
pub fn histogram(supports: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    if supports.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = supports.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = supports.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &x in supports {
        let i = (((x - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}

pub fn write_histogram_csv(path: &Path, supports: &[f64], bins: usize) -> Result<()> {
    write_csv(path, &["bin_lo", "bin_hi", "count"], &histogram(supports, bins))
}

/// Columns `z,t,v`.
pub fn write_velocity_grid(path: &Path, rows: &[(f64, f64, f64)]) -> Result<()> {
    write_csv(path, &["z", "t", "v"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_empty_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.write(&MetricsRow {
            kind: "eval",
            iteration: 3,
            clean_eval_return: Some(0.5),
            ..Default::default()
        })
        .unwrap();
        w.flush().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "eval,3,0,,,,,,,,,0.5,,0.0");
    }

    #[test]
    fn resume_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        let len = w.flush().unwrap();
        w.write(&MetricsRow {
            kind: "update",
            ..Default::default()
        })
        .unwrap();
        w.flush().unwrap();
        drop(w);
        let mut w = MetricsWriter::resume(&path, len).unwrap();
        assert_eq!(w.flush().unwrap(), len);
    }

    #[test]
    fn histogram_counts_everything() {
        let h = histogram(&[0.0, 0.1, 0.9, 1.0], 2);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 4);
        assert_eq!(h[0].2, 2);
        assert_eq!(histogram(&[2.0, 2.0], 3)[0].2, 2);
    }
}
