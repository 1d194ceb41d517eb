use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,split,top1,loss_ce,loss_kd_org,loss_kd_aug,wall_time_s";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub top1: f64,
    pub loss_ce: f64,
    pub loss_kd_org: f64,
    pub loss_kd_aug: f64,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.split.as_str(),
            self.top1,
            self.loss_ce,
            self.loss_kd_org,
            self.loss_kd_aug,
            self.wall_time_s
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        writeln!(s, "{}", r.csv_row()).unwrap();
    }
    s
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    fs::write(path, metrics_csv(records)).map_err(|e| Error::io(path, e))
}

/// Fraction of rows whose argmax equals the label.
pub fn top1(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_and_rows() {
        let r = MetricsRecord {
            epoch: 2,
            split: Split::Val,
            top1: 0.5,
            loss_ce: 1.25,
            loss_kd_org: 0.0,
            loss_kd_aug: 0.0,
            wall_time_s: 0.0,
        };
        assert_eq!(metrics_csv(&[r]), format!("{CSV_HEADER}\n2,val,0.5,1.25,0,0,0\n"));
    }

    #[test]
    fn top1_counts_hits() {
        assert_eq!(top1(&[0, 1, 1, 2], &[0, 1, 2, 2]), 0.75);
    }
}
