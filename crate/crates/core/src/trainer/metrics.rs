use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,train_loss,train_acc,test_acc,lr,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Nine significant digits.
fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            sig9(self.train_loss),
            sig9(self.train_acc),
            sig9(self.test_acc),
            sig9(self.lr),
            sig9(self.seconds)
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let bad = || Error::Corrupt(format!("malformed metrics line `{line}`"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let x = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            train_loss: x(1)?,
            train_acc: x(2)?,
            test_acc: x(3)?,
            lr: x(4)?,
            seconds: x(5)?,
        })
    }
}

/// Append-only metrics log.
pub struct MetricsLog {
    path: std::path::PathBuf,
}

impl MetricsLog {
    /// Starts a fresh log containing only the header.
    pub fn create(path: &Path) -> Result<Self> {
        fs::write(path, format!("{CSV_HEADER}\n"))?;
        Ok(Self { path: path.to_path_buf() })
    }

    /// Reopens a log for a run resumed after `epoch`, dropping any rows
    /// recorded later than that by the interrupted run.
    pub fn resume(path: &Path, epoch: usize) -> Result<Self> {
        let kept: Vec<EpochRecord> = match fs::read_to_string(path) {
            Ok(text) => read_records(&text)?.into_iter().filter(|r| r.epoch <= epoch).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let log = Self::create(path)?;
        for r in &kept {
            log.append(r)?;
        }
        Ok(log)
    }

    pub fn append(&self, r: &EpochRecord) -> Result<()> {
        let mut f = fs::OpenOptions::new().append(true).open(&self.path)?;
        writeln!(f, "{}", r.csv_line())?;
        Ok(())
    }
}

pub fn read_records(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Corrupt("metrics log has an unexpected header".into()));
    }
    lines.filter(|l| !l.trim().is_empty()).map(EpochRecord::parse_csv_line).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.k + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    /// `trace / total`, or 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    pub fn render(&self, class_names: &[String]) -> String {
        let label = |i: usize| class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
        let width = (0..self.k).map(|i| label(i).len()).max().unwrap_or(1).max(9);
        let mut out = format!("{:>width$}", "true\\pred");
        for j in 0..self.k {
            let _ = write!(out, " {:>width$}", label(j));
        }
        out.push('\n');
        for i in 0..self.k {
            let _ = write!(out, "{:>width$}", label(i));
            for j in 0..self.k {
                let _ = write!(out, " {:>width$}", self.get(i, j));
            }
            out.push('\n');
        }
        out
    }
}
