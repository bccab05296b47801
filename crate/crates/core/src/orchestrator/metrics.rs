use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FedConfig, OrchestratorError};
use crate::ClientId;

/// Nominal size of the full encoder-plus-head model the head is compared to.
pub const FULL_MODEL_PARAMS: f64 = 88.8e6;

/// Simulated bytes for one transfer of `param_count` 64-bit values.
pub fn transfer_bytes(param_count: usize) -> u64 {
    param_count as u64 * 8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 0 is the state after warm start.
    pub round: usize,
    pub participants: Vec<ClientId>,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub loss: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub param_count: usize,
    pub wall_ms: f64,
}

impl RoundReport {
    pub fn total_bytes(&self) -> u64 {
        self.bytes_up + self.bytes_down
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub total_bytes: u64,
    pub param_count: usize,
    /// `param_count` relative to the full model.
    pub head_fraction: f64,
    pub full_model_params: f64,
    pub config: FedConfig,
}

impl Summary {
    pub fn new(reports: &[RoundReport], param_count: usize, config: &FedConfig) -> Self {
        Self {
            final_accuracy: reports.last().map(|r| r.accuracy).unwrap_or(0.0),
            best_accuracy: reports.iter().map(|r| r.accuracy).fold(0.0, f64::max),
            total_bytes: reports.iter().map(|r| r.total_bytes()).sum(),
            param_count,
            head_fraction: param_count as f64 / FULL_MODEL_PARAMS,
            full_model_params: FULL_MODEL_PARAMS,
            config: config.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), OrchestratorError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn format_participants(p: &[ClientId]) -> String {
    p.iter().map(|c| c.0.to_string()).collect::<Vec<_>>().join(" ")
}

/// One CSV row per report: round, participants (space separated ids),
/// accuracy, loss, bytes_up, bytes_down, then one accuracy column per class.
pub fn write_csv(reports: &[RoundReport], path: &Path) -> Result<(), OrchestratorError> {
    let n_classes = reports.iter().map(|r| r.per_class.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["round", "participants", "accuracy", "loss", "bytes_up", "bytes_down"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..n_classes).map(|c| format!("acc_class_{c}")));
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![
            r.round.to_string(),
            format_participants(&r.participants),
            format!("{:.6}", r.accuracy),
            format!("{:.6}", r.loss),
            r.bytes_up.to_string(),
            r.bytes_down.to_string(),
        ];
        row.extend((0..n_classes).map(|c| match r.per_class.get(c) {
            Some(a) => format!("{a:.6}"),
            None => String::new(),
        }));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// A row of the metrics CSV as read back.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub round: usize,
    pub participants: Vec<ClientId>,
    pub accuracy: f64,
    pub loss: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub per_class: Vec<Option<f64>>,
}

fn parse<T: std::str::FromStr>(field: Option<&str>, what: &str) -> Result<T, OrchestratorError> {
    field
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| OrchestratorError::Metrics(format!("bad or missing {what}")))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>, OrchestratorError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let participants = rec
            .get(1)
            .unwrap_or("")
            .split_whitespace()
            .map(|s| s.parse().map(ClientId))
            .collect::<Result<_, _>>()
            .map_err(|_| OrchestratorError::Metrics("bad participant list".into()))?;
        out.push(CsvRow {
            round: parse(rec.get(0), "round")?,
            participants,
            accuracy: parse(rec.get(2), "accuracy")?,
            loss: parse(rec.get(3), "loss")?,
            bytes_up: parse(rec.get(4), "bytes_up")?,
            bytes_down: parse(rec.get(5), "bytes_down")?,
            per_class: rec.iter().skip(6).map(|s| s.parse().ok()).collect(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(round: usize, acc: f64) -> RoundReport {
        RoundReport {
            round,
            participants: vec![ClientId(0), ClientId(3)],
            accuracy: acc,
            per_class: vec![acc, 1.0 - acc],
            loss: 0.5,
            bytes_up: 2 * transfer_bytes(10),
            bytes_down: 2 * transfer_bytes(10),
            param_count: 10,
            wall_ms: 1.0,
        }
    }

    #[test]
    fn csv_round_trip_keeps_accuracy_to_six_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let reports: Vec<_> = (0..4).map(|r| report(r, 0.1234567 * r as f64 / 3.0)).collect();
        write_csv(&reports, &path).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in reports.iter().zip(&back) {
            assert_eq!(format!("{:.6}", a.accuracy), format!("{:.6}", b.accuracy));
            assert_eq!(b.participants, a.participants);
        }
        let header = fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("round,participants,accuracy,loss,bytes_up,bytes_down,acc_class_0,acc_class_1\n"));
    }

    #[test]
    fn summary_totals() {
        let reports = vec![report(0, 0.2), report(1, 0.9), report(2, 0.7)];
        let s = Summary::new(&reports, 10, &FedConfig::default());
        assert_eq!(s.final_accuracy, 0.7);
        assert_eq!(s.best_accuracy, 0.9);
        assert_eq!(s.total_bytes, 3 * 320);
    }
}
