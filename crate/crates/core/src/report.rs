//! Per-epoch training records.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn push(&mut self, epoch: usize, loss: f64, seconds: f64) {
        self.records.push(EpochRecord { epoch, loss, seconds });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// `epoch,loss,seconds` with the loss printed at full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,seconds\n");
        for r in &self.records {
            writeln!(out, "{},{:?},{:.3}", r.epoch, r.loss, r.seconds).expect("writing to a String");
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}
