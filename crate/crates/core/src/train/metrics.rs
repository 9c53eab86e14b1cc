use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

pub const CSV_HEADER: &str = "epoch,lr,train_loss,train_err,test_err,seconds";

/// One row of the metrics CSV. Epoch 0 is the evaluation before any
/// training; its train columns are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Percent.
    pub train_err: f64,
    /// Percent.
    pub test_err: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.4},{:.2},{:.3}",
            self.epoch, self.lr, self.train_loss, self.train_err, self.test_err, self.seconds
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<EpochRecord>,
}

impl RunMetrics {
    pub fn push(&mut self, r: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.epoch <= last.epoch {
                return Err(Error::invalid(format!("epoch {} after {}", r.epoch, last.epoch)));
            }
        }
        for err in [r.train_err, r.test_err] {
            if !err.is_nan() && !(0.0..=100.0).contains(&err) {
                return Err(Error::invalid(format!("error rate {err} outside [0, 100]")));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{}", r.csv_row());
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::invalid("metrics CSV: unexpected header"));
        }
        let mut out = Self::default();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::invalid(format!("metrics CSV: bad row {}: {line}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad());
            out.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                lr: num(1)?,
                train_loss: num(2)?,
                train_err: num(3)?,
                test_err: num(4)?,
                seconds: num(5)?,
            })?;
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
