//! SVG charts for the bench reports.

use std::collections::BTreeMap;
use std::path::Path;

use extmind::eval::{PerplexityReport, Tally, TimingReport};
use plotters::prelude::*;

use crate::error::{CliError, Result};

const SIZE: (u32, u32) = (720, 480);

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::Plot(e.to_string())
}

fn bounds(points: impl Iterator<Item = (f64, f64)>) -> Option<((f64, f64), (f64, f64))> {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in points {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if !x0.is_finite() {
        return None;
    }
    let pad = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    Some((pad(x0, x1), pad(y0.min(0.0), y1 * 1.05)))
}

fn line_chart(
    path: &Path,
    title: &str,
    x_desc: &str,
    y_desc: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    let Some(((x0, x1), (y0, y1))) = bounds(series.iter().flat_map(|(_, p)| p.iter().copied())) else {
        return Ok(());
    };
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw().map_err(plot_err)?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart.draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(plot_err)?;
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Perplexity against input length, one line per method.
pub fn perplexity(path: &Path, reports: &[PerplexityReport]) -> Result<()> {
    let series: Vec<(String, Vec<(f64, f64)>)> = reports
        .iter()
        .map(|r| {
            let pts = r.rows.iter().filter_map(|row| Some((row.input_length as f64, row.perplexity?))).collect();
            (r.method.clone(), pts)
        })
        .collect();
    line_chart(path, "Perplexity by input length", "input tokens", "perplexity", &series)
}

/// Cumulative seconds against queries answered.
pub fn timing(path: &Path, report: &TimingReport) -> Result<()> {
    let series: Vec<(String, Vec<(f64, f64)>)> = report
        .curves
        .iter()
        .map(|c| {
            (c.method.clone(), c.cumulative_seconds.iter().enumerate().map(|(i, &s)| ((i + 1) as f64, s)).collect())
        })
        .collect();
    line_chart(path, "Cumulative time per query", "queries", "seconds", &series)
}

/// Accuracy grid: document length down, fact appearances across.
pub fn heatmap(path: &Path, title: &str, cells: &BTreeMap<String, BTreeMap<String, Tally>>) -> Result<()> {
    let rows: Vec<&String> = cells.keys().collect();
    let mut cols: Vec<&String> = cells.values().flat_map(|m| m.keys()).collect();
    cols.sort();
    cols.dedup();
    if rows.is_empty() || cols.is_empty() {
        return Ok(());
    }
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let root = root.titled(title, ("sans-serif", 20)).map_err(plot_err)?;
    let (w, h) = root.dim_in_pixel();
    let (left, top) = (110i32, 30i32);
    let cw = (w as i32 - left - 20) / cols.len() as i32;
    let ch = (h as i32 - top - 40) / rows.len() as i32;
    let label = ("sans-serif", 14).into_font();
    for (j, c) in cols.iter().enumerate() {
        let x = left + j as i32 * cw + cw / 2 - 10;
        root.draw(&Text::new(format!("{c}x"), (x, 8), label.clone())).map_err(plot_err)?;
    }
    for (i, r) in rows.iter().enumerate() {
        let y = top + i as i32 * ch;
        root.draw(&Text::new(format!("{r} tok"), (8, y + ch / 2 - 7), label.clone())).map_err(plot_err)?;
        for (j, c) in cols.iter().enumerate() {
            let x = left + j as i32 * cw;
            let Some(t) = cells[*r].get(*c) else { continue };
            let a = t.accuracy();
            let shade = RGBColor((255.0 * (1.0 - a)) as u8, (90.0 + 120.0 * a) as u8, 90);
            root.draw(&Rectangle::new([(x, y), (x + cw - 2, y + ch - 2)], shade.filled())).map_err(plot_err)?;
            let text = format!("{:.2} (n={})", a, t.total);
            root.draw(&Text::new(text, (x + 6, y + ch / 2 - 7), label.clone().color(&BLACK))).map_err(plot_err)?;
        }
    }
    root.present().map_err(plot_err)
}
