//! Read-only reduction of run directories into tables and IoU-vs-time curves.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiment::CellInfo;
use crate::metrics::{aggregate_folds, MeanStd};
use crate::train::RunLog;

/// Logs of one cell, in fold order.
#[derive(Debug, Clone)]
pub struct CellLogs {
    pub cell: CellInfo,
    pub folds: Vec<(usize, RunLog)>,
}

/// Fold-averaged IoU over fold-averaged cumulative training time.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    /// `(epoch, mean cumulative seconds, mean test IoU)`
    pub points: Vec<(usize, f64, f64)>,
    /// Set when some fold logged more epochs than others.
    pub truncated_at: Option<usize>,
}

pub fn fold_curve(logs: &[&RunLog]) -> Curve {
    let common = logs.iter().map(|l| l.records.len()).min().unwrap_or(0);
    let longest = logs.iter().map(|l| l.records.len()).max().unwrap_or(0);
    let n = logs.len() as f64;
    let points = (0..common)
        .map(|e| {
            let secs = logs.iter().map(|l| l.records[e].cumulative_seconds).sum::<f64>() / n;
            let iou = logs.iter().map(|l| l.records[e].metrics.headline_iou()).sum::<f64>() / n;
            (logs[0].records[e].epoch, secs, iou)
        })
        .collect();
    Curve {
        points,
        truncated_at: (common < longest).then_some(common),
    }
}

impl CellLogs {
    pub fn curve(&self) -> Curve {
        let logs: Vec<&RunLog> = self.folds.iter().map(|(_, l)| l).collect();
        fold_curve(&logs)
    }

    /// Mean ± std over folds of each fold's last logged epoch.
    pub fn aggregate(&self) -> Result<Vec<(String, MeanStd)>> {
        let finals: Vec<_> = self
            .folds
            .iter()
            .filter_map(|(_, l)| l.records.last().map(|r| r.metrics.clone()))
            .collect();
        aggregate_folds(&finals)
    }
}

/// Every cell directory (holding `cell.toml`) below `run_dir`, sorted by name.
pub fn load_run_dir(run_dir: &Path) -> Result<Vec<CellLogs>> {
    let mut cells = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(run_dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let dir = entry.path();
        let info_path = dir.join("cell.toml");
        if !info_path.is_file() {
            continue;
        }
        let cell: CellInfo =
            toml::from_str(&fs::read_to_string(&info_path)?).map_err(|e| Error::Config(e.to_string()))?;
        let mut folds = Vec::new();
        for fold in 0..crate::train::N_FOLDS {
            let log = dir.join(format!("fold{fold}")).join("log.csv");
            if log.is_file() {
                let l = RunLog::read(&log)?;
                if !l.records.is_empty() {
                    folds.push((fold, l));
                }
            }
        }
        if !folds.is_empty() {
            cells.push(CellLogs { cell, folds });
        }
    }
    if cells.is_empty() {
        return Err(Error::InvalidArgument(format!("no run logs under {}", run_dir.display())));
    }
    Ok(cells)
}

/// Aggregate table as CSV: one row per cell, mean and std columns per metric.
pub fn table_csv(cells: &[CellLogs]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header_written = false;
    for c in cells {
        let agg = c.aggregate()?;
        if !header_written {
            let mut h = vec!["cell".to_string(), "family".into(), "size".into(), "data_setting".into(), "folds".into()];
            for (name, _) in &agg {
                h.push(format!("{name}_mean"));
                h.push(format!("{name}_std"));
            }
            w.write_record(&h).map_err(|e| Error::Format(e.to_string()))?;
            header_written = true;
        }
        let mut row = vec![
            c.cell.name(),
            c.cell.family.to_string(),
            c.cell.size.to_string(),
            c.cell.data_setting.to_string(),
            c.folds.len().to_string(),
        ];
        for (_, m) in &agg {
            row.push(m.mean.to_string());
            row.push(m.std.to_string());
        }
        w.write_record(&row).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Curve points as CSV (`epoch,cumulative_seconds,iou`).
pub fn curve_csv(curve: &Curve) -> String {
    let mut s = String::from("epoch,cumulative_seconds,iou\n");
    for (e, t, v) in &curve.points {
        s.push_str(&format!("{e},{t},{v}\n"));
    }
    s
}
