//! Loss curves from a metrics file.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::metrics::{read_metrics, MetricsRow};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ReportSummary {
    pub rows: usize,
    pub min_train_loss: Option<f64>,
    pub min_val_loss: Option<f64>,
    pub plots: Vec<PathBuf>,
}

impl ReportSummary {
    pub fn line(&self) -> String {
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
        format!(
            "rows={} min_train_loss={} min_val_loss={} plots={}",
            self.rows,
            f(self.min_train_loss),
            f(self.min_val_loss),
            self.plots
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(",")
        )
    }
}

fn series(rows: &[MetricsRow], split: &str, x: impl Fn(&MetricsRow) -> f64) -> Vec<(f64, f64)> {
    rows.iter()
        .filter(|r| r.split == split && r.loss.is_finite())
        .map(|r| (x(r), r.loss))
        .filter(|(x, _)| x.is_finite())
        .collect()
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

/// Named series of `(x, loss)` points.
type Line<'a> = (&'a str, Vec<(f64, f64)>, RGBColor);

fn draw(path: &Path, title: &str, x_label: &str, lines: &[Line]) -> Result<()> {
    let pts: Vec<&(f64, f64)> = lines.iter().flat_map(|(_, s, _)| s.iter()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &&(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc("loss")
        .x_label_formatter(&|v| format!("{v:.3e}"))
        .draw()
        .map_err(plot_err)?;
    for (name, s, color) in lines {
        let color = *color;
        chart
            .draw_series(LineSeries::new(s.iter().copied(), color))
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE)
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Write `loss_vs_steps.svg` and `loss_vs_flops.svg` into `out_dir`.
pub fn report(metrics: &Path, out_dir: &Path) -> Result<ReportSummary> {
    let rows = read_metrics(metrics)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let min = |split: &str| {
        rows.iter()
            .filter(|r| r.split == split && r.loss.is_finite())
            .map(|r| r.loss)
            .min_by(|a, b| a.total_cmp(b))
    };
    let mut plots = Vec::new();
    for (file, x_label, x) in [
        (
            "loss_vs_steps.svg",
            "step",
            (|r: &MetricsRow| r.step as f64) as fn(&MetricsRow) -> f64,
        ),
        ("loss_vs_flops.svg", "cumulative FLOPs", |r: &MetricsRow| {
            r.cumulative_flops
        }),
    ] {
        let path = out_dir.join(file);
        draw(
            &path,
            &format!("loss vs {x_label}"),
            x_label,
            &[
                ("train", series(&rows, "train", x), BLUE),
                ("val", series(&rows, "val", x), RED),
            ],
        )?;
        plots.push(path);
    }
    Ok(ReportSummary {
        rows: rows.len(),
        min_train_loss: min("train"),
        min_val_loss: min("val"),
        plots,
    })
}
