//! SVG charts for run directories.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;

fn err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e}")
}

/// One line per domain over refresh steps.
pub fn gamma_chart(path: &Path, title: &str, domains: &[String], rows: &[(f64, Vec<f64>)]) -> Result<()> {
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let x_max = rows.iter().map(|r| r.0).fold(1.0, f64::max);
    let y_max = rows.iter().flat_map(|r| r.1.iter().copied()).fold(0.0, f64::max).max(0.1) * 1.1;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("domain weights: {title}"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("gamma")
        .draw()
        .map_err(err)?;
    for (d, name) in domains.iter().enumerate() {
        let color = Palette99::pick(d).to_rgba();
        chart
            .draw_series(LineSeries::new(rows.iter().map(|(s, g)| (*s, g[d])), color.stroke_width(2)))
            .map_err(err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Grouped bars: one group per domain, one bar per run.
pub fn ndcg_bars(path: &Path, runs: &[(String, Vec<(String, f64)>)]) -> Result<()> {
    let domains: Vec<String> = runs
        .first()
        .map(|r| r.1.iter().map(|(d, _)| d.clone()).collect())
        .unwrap_or_default();
    let groups = domains.len().max(1);
    let width = runs.len().max(1);
    let y_max = runs
        .iter()
        .flat_map(|r| r.1.iter().map(|c| c.1))
        .fold(0.0, f64::max)
        .max(0.05)
        * 1.15;
    let root = SVGBackend::new(path, (900, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("test NDCG@5 by domain", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..groups as f64, 0.0..y_max)
        .map_err(err)?;
    let labels = domains.clone();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(groups * 2 + 1)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 0.26 {
                labels.get(i).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("NDCG@5")
        .draw()
        .map_err(err)?;
    let slot = 0.8 / width as f64;
    for (k, (name, cells)) in runs.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        chart
            .draw_series(cells.iter().enumerate().map(|(g, (_, v))| {
                let x0 = g as f64 + 0.1 + k as f64 * slot;
                Rectangle::new([(x0, 0.0), (x0 + slot * 0.9, *v)], color.filled())
            }))
            .map_err(err)?
            .label(name.clone())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}
