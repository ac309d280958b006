//! Metric log: one row per (iteration, split) evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::Split;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub iteration: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

/// Evaluation history. Timing lives in a separate series so the metric
/// file itself stays reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    pub records: Vec<MetricRecord>,
    /// `(iteration, seconds since start)` at each evaluation.
    pub timing: Vec<(usize, f64)>,
}

pub const METRICS_HEADER: &str = "iteration,split,loss,accuracy,lr";

impl MetricLog {
    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if let Some(last) = self.records.iter().rev().find(|r| r.split == record.split) {
            if record.iteration <= last.iteration {
                return Err(Error::Numeric(format!(
                    "metric iteration {} does not follow {}",
                    record.iteration, last.iteration
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn last(&self, split: Split) -> Option<&MetricRecord> {
        self.split(split).last()
    }

    /// Drops every record after `iteration`.
    pub fn truncate_after(&mut self, iteration: usize) {
        self.records.retain(|r| r.iteration <= iteration);
        self.timing.retain(|&(i, _)| i <= iteration);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            // `{:?}` prints the shortest representation that round-trips
            writeln!(
                out,
                "{},{},{:?},{:?},{:?}",
                r.iteration, r.split, r.loss, r.accuracy, r.lr
            )
            .expect("string write");
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("iteration,elapsed_s\n");
        for (i, t) in &self.timing {
            writeln!(out, "{i},{t:.3}").expect("string write");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(METRICS_HEADER) {
            return Err(Error::config("metrics file has an unexpected header"));
        }
        let mut log = MetricLog::default();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::config(format!("metrics line {}: {line:?}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            let [it, split, loss, acc, lr] = f[..] else {
                return Err(bad());
            };
            let split = match split {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad()),
            };
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            log.push(MetricRecord {
                iteration: it.parse().map_err(|_| bad())?,
                split,
                loss: num(loss)?,
                accuracy: num(acc)?,
                lr: num(lr)?,
            })?;
        }
        Ok(log)
    }

    /// Writes `metrics.csv` and `timing.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("metrics.csv"), self.to_csv().as_bytes())?;
        write_atomic(&dir.join("timing.csv"), self.timing_csv().as_bytes())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(iteration: usize, split: Split, loss: f64) -> MetricRecord {
        MetricRecord {
            iteration,
            split,
            loss,
            accuracy: 0.1 + loss / 7.0,
            lr: 0.002,
        }
    }

    #[test]
    fn csv_roundtrip_exact() {
        let mut log = MetricLog::default();
        log.push(rec(0, Split::Train, 0.123456789012345)).unwrap();
        log.push(rec(0, Split::Test, 1.0 / 3.0)).unwrap();
        log.push(rec(500, Split::Train, 2e-17)).unwrap();
        assert_eq!(MetricLog::from_csv(&log.to_csv()).unwrap().records, log.records);
    }

    #[test]
    fn iterations_must_increase() {
        let mut log = MetricLog::default();
        log.push(rec(10, Split::Test, 1.0)).unwrap();
        assert!(log.push(rec(10, Split::Test, 1.0)).is_err());
        assert!(log.push(rec(10, Split::Train, 1.0)).is_ok());
    }

    #[test]
    fn truncate() {
        let mut log = MetricLog::default();
        for i in [0, 500, 1000] {
            log.push(rec(i, Split::Test, 1.0)).unwrap();
            log.timing.push((i, i as f64));
        }
        log.truncate_after(500);
        assert_eq!(log.records.len(), 2);
        assert_eq!(log.timing.len(), 2);
    }
}
