use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::StepRecord;
use crate::objectives::RECON;
use crate::{Error, Result};

pub const METRIC_HEADER: [&str; 7] = ["step", "loss_eg", "loss_did", "loss_dimg", "loss_dage", "recon", "age_val_acc"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss_eg: f64,
    pub loss_did: f64,
    pub loss_dimg: f64,
    pub loss_dage: f64,
    pub recon: f64,
    pub age_val_acc: Option<f64>,
}

impl From<&StepRecord> for MetricRow {
    fn from(r: &StepRecord) -> Self {
        let b = &r.bundle;
        MetricRow {
            step: r.step,
            loss_eg: b.loss_eg,
            loss_did: b.loss_did,
            loss_dimg: b.loss_dimg,
            loss_dage: b.loss_dage,
            recon: b.component(RECON),
            age_val_acc: r.age_val_acc,
        }
    }
}

/// Append-only CSV of per-step losses.
pub struct MetricLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl MetricLog {
    /// Start a log for a run whose next step is `completed + 1`. Rows past
    /// `completed` left behind by an interrupted run are dropped.
    pub fn open(path: &Path, completed: u64) -> Result<Self> {
        let kept = if completed > 0 && path.exists() {
            Self::read(path)?.into_iter().filter(|r| r.step <= completed).collect()
        } else {
            Vec::new()
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = MetricLog {
            path: path.to_path_buf(),
            writer: csv::WriterBuilder::new().has_headers(false).from_writer(file),
        };
        log.writer.write_record(METRIC_HEADER).map_err(|e| log.err(e))?;
        for r in &kept {
            log.append(r)?;
        }
        log.flush()?;
        Ok(log)
    }

    /// Reopen without rewriting existing rows.
    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricLog {
            path: path.to_path_buf(),
            writer: csv::WriterBuilder::new().has_headers(false).from_writer(file),
        })
    }

    fn err(&self, e: csv::Error) -> Error {
        Error::io(&self.path, e.into())
    }

    pub fn append(&mut self, row: &MetricRow) -> Result<()> {
        let acc = row.age_val_acc.map(|a| a.to_string()).unwrap_or_default();
        self.writer
            .write_record([
                row.step.to_string(),
                row.loss_eg.to_string(),
                row.loss_did.to_string(),
                row.loss_dimg.to_string(),
                row.loss_dage.to_string(),
                row.recon.to_string(),
                acc,
            ])
            .map_err(|e| self.err(e))?;
        self.flush()
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<MetricRow>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::ingest(path, None, e.to_string()))?;
        r.deserialize()
            .map(|row| {
                row.map_err(|e: csv::Error| {
                    Error::ingest(path, e.position().map(|p| p.line() as usize), e.to_string())
                })
            })
            .collect()
    }
}
