use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricRecord;

/// Metrics after one epoch. `cumulative_seconds` counts training time only.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cumulative_seconds: f64,
    pub loss: f64,
    pub metrics: MetricRecord,
}

/// Per-epoch history of one training run.
///
/// CSV columns: `epoch, cumulative_seconds, loss`, then the metric columns.
/// Only `cumulative_seconds` depends on the machine.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("run log: {e}"))
}

impl RunLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let names: Vec<String> = self
            .records
            .first()
            .map(|r| r.metrics.names().map(str::to_string).collect())
            .unwrap_or_default();
        let mut header = vec!["epoch".to_string(), "cumulative_seconds".into(), "loss".into()];
        header.extend(names);
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![r.epoch.to_string(), r.cumulative_seconds.to_string(), r.loss.to_string()];
            row.extend(r.metrics.entries.iter().map(|(_, v)| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        if header.len() < 3 || header[..3] != ["epoch", "cumulative_seconds", "loss"] {
            return Err(Error::Format(format!("unexpected run-log header {header:?}")));
        }
        let names: Vec<&str> = header[3..].iter().map(String::as_str).collect();
        let mut records = Vec::new();
        for row in r.records() {
            let row = row.map_err(csv_err)?;
            let num = |i: usize| -> Result<f64> {
                row.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad value in column {i} of run log")))
            };
            let values: Vec<f64> = (3..header.len()).map(num).collect::<Result<_>>()?;
            records.push(EpochRecord {
                epoch: num(0)? as usize,
                cumulative_seconds: num(1)?,
                loss: num(2)?,
                metrics: MetricRecord::new(&names, &values),
            });
        }
        Ok(RunLog { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    pub fn is_time_increasing(&self) -> bool {
        self.records.windows(2).all(|w| w[1].cumulative_seconds > w[0].cumulative_seconds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let log = RunLog {
            records: (1..=3)
                .map(|e| EpochRecord {
                    epoch: e,
                    cumulative_seconds: 0.1 * e as f64 + 1e-7,
                    loss: 1.0 / e as f64,
                    metrics: MetricRecord::new(&["dice", "iou"], &[0.3 * e as f64, 0.2 / 3.0]),
                })
                .collect(),
        };
        let text = log.to_csv().unwrap();
        assert!(text.starts_with("epoch,cumulative_seconds,loss,dice,iou\n"));
        assert_eq!(RunLog::from_csv(&text).unwrap(), log);
        assert!(log.is_time_increasing());
    }
}
