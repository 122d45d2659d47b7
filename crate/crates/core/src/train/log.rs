use std::fmt::Write as _;
use std::io::Write;

use crate::error::Result;

pub const METRICS_HEADER: &str = "epoch,step,train_loss,test_acc,lr,sparsity,ece,aurc,mean_jsv";

/// One log line. Per-step probe rows carry `mean_jsv` only; end-of-epoch
/// rows carry the loss and evaluation metrics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub lr: Option<f64>,
    pub sparsity: Option<f64>,
    pub ece: Option<f64>,
    pub aurc: Option<f64>,
    pub mean_jsv: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    /// End-of-epoch rows.
    pub fn epochs(&self) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(|r| r.train_loss.is_some())
    }

    pub fn last_epoch(&self) -> Option<&MetricsRow> {
        self.epochs().last()
    }

    /// `(step, mean_jsv)` from the per-step probe rows.
    pub fn jsv_trace(&self) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.train_loss.is_none())
            .filter_map(|r| r.mean_jsv.map(|j| (r.step, j)))
            .collect()
    }

    /// Appends `other`, shifting its epochs and steps past this log's last row.
    pub fn extend_after(&mut self, other: &MetricsLog) {
        let (e0, s0) = self.rows.last().map(|r| (r.epoch + 1, r.step)).unwrap_or((0, 0));
        self.rows.extend(other.rows.iter().map(|r| MetricsRow { epoch: r.epoch + e0, step: r.step + s0, ..r.clone() }));
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.step,
                cell(r.train_loss),
                cell(r.test_acc),
                cell(r.lr),
                cell(r.sparsity),
                cell(r.ece),
                cell(r.aurc),
                cell(r.mean_jsv)
            );
        }
        s
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unset_metrics_are_empty() {
        let mut log = MetricsLog::default();
        log.push(MetricsRow { epoch: 0, step: 0, mean_jsv: Some(1.5), ..Default::default() });
        log.push(MetricsRow { epoch: 0, step: 4, train_loss: Some(0.5), test_acc: Some(0.75), ..Default::default() });
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "0,0,,,,,,,1.5");
        assert_eq!(lines[2], "0,4,0.5,0.75,,,,,");
        assert_eq!(log.jsv_trace(), vec![(0, 1.5)]);
        assert_eq!(log.last_epoch().unwrap().step, 4);
    }
}
