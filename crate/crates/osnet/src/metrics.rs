//! Per-epoch CSV logs and the evaluation report.
//!
//! Floats are written in Rust's shortest round-trip form, so reruns with the
//! same seed produce byte-identical files.

use std::fs::File;
use std::path::{Path, PathBuf};

use osnet_core::data::RankingResult;
use osnet_core::nn::CandidateKind;
use osnet_core::train::{EpochMetrics, SearchEpoch};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A CSV file that is flushed after every row, so a crashed run keeps its
/// history.
pub struct CsvLog {
    writer: csv::Writer<File>,
    path: PathBuf,
}

impl CsvLog {
    pub fn create(path: &Path, header: &[String]) -> Result<Self> {
        let file = File::create(path).map_err(Error::io(path))?;
        let mut log = CsvLog { writer: csv::Writer::from_writer(file), path: path.to_owned() };
        log.row(header)?;
        Ok(log)
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        self.writer.write_record(fields)?;
        self.writer.flush().map_err(Error::io(&self.path))
    }
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| (*s).to_owned()).collect()
}

pub fn train_header() -> Vec<String> {
    strings(&["epoch", "lr", "loss", "accuracy"])
}

pub fn train_row(m: &EpochMetrics) -> Vec<String> {
    vec![m.epoch.to_string(), m.lr.to_string(), m.loss.to_string(), m.accuracy.to_string()]
}

/// `epoch, temperature, lr, loss`, then `softmax(π)` of every block as
/// `b<i>_<candidate>` columns.
pub fn search_header(blocks: usize) -> Vec<String> {
    let mut h = strings(&["epoch", "temperature", "lr", "loss"]);
    for b in 0..blocks {
        h.extend(CandidateKind::ALL.iter().map(|k| format!("b{b}_{}", k.name())));
    }
    h
}

pub fn search_row(e: &SearchEpoch) -> Vec<String> {
    let mut r = vec![e.epoch.to_string(), e.temperature.to_string(), e.lr.to_string(), e.loss.to_string()];
    r.extend(e.probabilities.iter().flatten().map(f64::to_string));
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
    /// `cmc[k − 1]` is the rank-`k` accuracy.
    pub cmc: Vec<f64>,
    /// Number of evaluated queries.
    pub queries: usize,
    /// Queries without a valid gallery match.
    pub excluded: Vec<usize>,
    pub average_precision: Vec<f64>,
}

impl From<&RankingResult> for EvalReport {
    fn from(r: &RankingResult) -> Self {
        EvalReport {
            r1: r.r1(),
            r5: r.r5(),
            r10: r.r10(),
            map: r.map,
            cmc: r.cmc.clone(),
            queries: r.queries.len(),
            excluded: r.excluded.clone(),
            average_precision: r.average_precision.clone(),
        }
    }
}
