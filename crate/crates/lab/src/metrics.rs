//! Append-only metric records: JSON lines per run, consolidated CSV.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{io_err, LabError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub step: u64,
    pub metric: String,
    /// Non-finite values are written as `null` and read back as NaN.
    #[serde(serialize_with = "ser_value", deserialize_with = "de_value")]
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hist: Option<Vec<f64>>,
    pub wall_s: f64,
}

fn ser_value<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn de_value<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl MetricRecord {
    /// Equal in every field except wall-clock time.
    pub fn same_content(&self, other: &Self) -> bool {
        let eq = |a: f64, b: f64| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan());
        self.run_id == other.run_id
            && self.step == other.step
            && self.metric == other.metric
            && eq(self.value, other.value)
            && self.hist == other.hist
    }
}

/// Collects the records of one run and optionally streams them to a file.
pub struct MetricSink {
    run_id: String,
    records: Vec<MetricRecord>,
    seen: HashSet<(u64, String)>,
    file: Option<BufWriter<File>>,
    path: Option<PathBuf>,
    start: Instant,
}

impl MetricSink {
    pub fn memory(run_id: &str) -> Self {
        Self {
            run_id: run_id.to_string(),
            records: Vec::new(),
            seen: HashSet::new(),
            file: None,
            path: None,
            start: Instant::now(),
        }
    }

    /// Streams to `<dir>/<run_id>.jsonl`, truncating any previous file.
    pub fn to_dir(run_id: &str, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(format!("{run_id}.jsonl"));
        let f = File::create(&path).map_err(io_err(&path))?;
        let mut s = Self::memory(run_id);
        s.file = Some(BufWriter::new(f));
        s.path = Some(path);
        Ok(s)
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn into_records(mut self) -> Result<Vec<MetricRecord>> {
        self.flush()?;
        Ok(std::mem::take(&mut self.records))
    }

    pub fn record(&mut self, step: u64, metric: impl Into<String>, value: f64) -> Result<()> {
        self.push(step, metric.into(), value, None)
    }

    pub fn record_hist(&mut self, step: u64, metric: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let mean = if values.is_empty() {
            f64::NAN
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        self.push(step, metric.into(), mean, Some(values))
    }

    fn push(&mut self, step: u64, metric: String, value: f64, hist: Option<Vec<f64>>) -> Result<()> {
        if !self.seen.insert((step, metric.clone())) {
            return Err(LabError::DuplicateMetric {
                run_id: self.run_id.clone(),
                step,
                metric,
            });
        }
        let rec = MetricRecord {
            run_id: self.run_id.clone(),
            step,
            metric,
            value,
            hist,
            wall_s: self.start.elapsed().as_secs_f64(),
        };
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&rec)?;
            let path = self.path.clone().unwrap_or_default();
            writeln!(f, "{line}").map_err(io_err(path))?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            let path = self.path.clone().unwrap_or_default();
            f.flush().map_err(io_err(path))?;
        }
        Ok(())
    }
}

/// All `(step, value)` pairs of one metric, in record order.
pub fn series(records: &[MetricRecord], metric: &str) -> Vec<(u64, f64)> {
    records
        .iter()
        .filter(|r| r.metric == metric)
        .map(|r| (r.step, r.value))
        .collect()
}

/// Value of the last record of `metric`, if any.
pub fn last_value(records: &[MetricRecord], metric: &str) -> Option<f64> {
    records.iter().rev().find(|r| r.metric == metric).map(|r| r.value)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| LabError::Metrics {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Every `*.jsonl` file under `dir`, sorted by path.
pub fn jsonl_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| LabError::Io {
            path: dir.to_path_buf(),
            source: e.into(),
        })?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|e| e == "jsonl") {
            files.push(entry.path().to_path_buf());
        }
    }
    Ok(files)
}

/// Writes `run_id,step,metric,value` rows for every record found under
/// `dir`; returns the number of rows.
pub fn write_consolidated_csv(dir: &Path, out: &Path) -> Result<usize> {
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["run_id", "step", "metric", "value"])?;
    let mut n = 0;
    for file in jsonl_files(dir)? {
        for r in read_jsonl(&file)? {
            let value = if r.value.is_finite() {
                r.value.to_string()
            } else {
                "NaN".to_string()
            };
            w.write_record([r.run_id.as_str(), &r.step.to_string(), &r.metric, &value])?;
            n += 1;
        }
    }
    w.flush().map_err(io_err(out))?;
    Ok(n)
}
