//! SVG curves of fold-averaged IoU against cumulative training time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use rotunet::report::CellLogs;
use rotunet::Error;

const COLOURS: [RGBColor; 4] = [BLACK, RED, BLUE, GREEN];

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Format(format!("plot: {e}"))
}

/// One file per (model size, data setting), one line per family, log-scaled time axis.
pub fn plot_curves(cells: &[CellLogs], out: &Path) -> rotunet::Result<Vec<PathBuf>> {
    let mut groups: BTreeMap<String, Vec<&CellLogs>> = BTreeMap::new();
    for c in cells {
        groups
            .entry(format!("{}-{}data", c.cell.size, c.cell.data_setting))
            .or_default()
            .push(c);
    }
    let mut written = Vec::new();
    for (key, group) in groups {
        let curves: Vec<_> = group.iter().map(|c| (c.cell.family.to_string(), c.curve())).collect();
        let points = curves.iter().flat_map(|(_, c)| c.points.iter());
        let (mut t_lo, mut t_hi) = (f64::INFINITY, 0.0f64);
        for &(_, t, _) in points {
            t_lo = t_lo.min(t);
            t_hi = t_hi.max(t);
        }
        if !t_lo.is_finite() {
            continue;
        }
        let t_lo = (t_lo * 0.8).max(1e-3);
        let t_hi = (t_hi * 1.25).max(t_lo * 10.0);
        let path = out.join(format!("curves_{key}.svg"));
        {
            let root = SVGBackend::new(&path, (720, 480)).into_drawing_area();
            root.fill(&WHITE).map_err(plot_err)?;
            let mut chart = ChartBuilder::on(&root)
                .caption(format!("IoU over cumulative training time ({key})"), ("sans-serif", 18))
                .margin(12)
                .x_label_area_size(40)
                .y_label_area_size(50)
                .build_cartesian_2d((t_lo..t_hi).log_scale(), 0f64..1f64)
                .map_err(plot_err)?;
            chart
                .configure_mesh()
                .x_desc("cumulative seconds")
                .y_desc("test IoU (fold mean)")
                .draw()
                .map_err(plot_err)?;
            for (i, (family, curve)) in curves.iter().enumerate() {
                let colour = COLOURS[i % COLOURS.len()];
                chart
                    .draw_series(LineSeries::new(curve.points.iter().map(|&(_, t, v)| (t, v)), colour.stroke_width(2)))
                    .map_err(plot_err)?
                    .label(family.clone())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], colour.stroke_width(2)));
            }
            chart
                .configure_series_labels()
                .border_style(BLACK)
                .background_style(WHITE)
                .draw()
                .map_err(plot_err)?;
            root.present().map_err(plot_err)?;
        }
        written.push(path);
    }
    Ok(written)
}
