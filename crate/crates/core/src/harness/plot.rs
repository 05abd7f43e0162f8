use std::collections::BTreeMap;

use plotters::prelude::*;

use super::report::{mean, Report, RowReport, Stage};
use crate::error::{Error, Result};

const SIZE: (u32, u32) = (720, 420);
const COLORS: [RGBColor; 2] = [BLUE, RED];

type Series = (String, Vec<(f64, f64)>);

/// Row whose curves are plotted: the last one that went through both
/// stages, else the last one with any curve.
fn featured(report: &Report) -> Option<&RowReport> {
    let has = |r: &&RowReport, stage| {
        r.seeds
            .iter()
            .any(|s| s.curve.iter().any(|c| c.stage == stage))
    };
    report
        .rows
        .iter()
        .rev()
        .find(|r| has(r, Stage::Finetune))
        .or_else(|| report.rows.iter().rev().find(|r| has(r, Stage::Distill)))
}

/// Seed-averaged value per epoch, keyed by epoch.
fn averaged(points: impl Iterator<Item = (usize, f64)>) -> Vec<(usize, f64)> {
    let mut by_epoch: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (e, v) in points {
        by_epoch.entry(e).or_default().push(v);
    }
    by_epoch
        .into_iter()
        .map(|(e, vs)| (e, mean(vs).expect("non-empty")))
        .collect()
}

fn draw(title: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let plot_err = |e: &dyn std::fmt::Display| Error::invalid(format!("plotting failed: {e}"));
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x_max, mut y_min, mut y_max) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    let pad = ((y_max - y_min) * 0.05).max(1e-3);

    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(56)
            .build_cartesian_2d(0.0..x_max, (y_min - pad)..(y_max + pad))
            .map_err(|e| plot_err(&e))?;
        chart
            .configure_mesh()
            .x_desc("epoch")
            .y_desc(y_label)
            .draw()
            .map_err(|e| plot_err(&e))?;
        for (i, (label, pts)) in series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
                .map_err(|e| plot_err(&e))?
                .label(label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(&e))?;
        root.present().map_err(|e| plot_err(&e))?;
    }
    Ok(svg)
}

/// Seed-averaged target accuracy per epoch, one series per stage, the
/// fine-tuning epochs continuing after the distillation ones.
pub fn plot_convergence(report: &Report) -> Result<String> {
    let Some(row) = featured(report) else {
        return draw("accuracy", "accuracy", &[]);
    };
    let curve = |stage| {
        averaged(row.seeds.iter().flat_map(|s| {
            s.curve
                .iter()
                .filter(move |c| c.stage == stage)
                .map(|c| (c.epoch, c.accuracy))
        }))
    };
    let distill = curve(Stage::Distill);
    let offset = distill.last().map_or(0, |p| p.0);
    let mut series: Vec<Series> = vec![(
        Stage::Distill.label().into(),
        distill.iter().map(|&(e, v)| (e as f64, v)).collect(),
    )];
    let finetune = curve(Stage::Finetune);
    if !finetune.is_empty() {
        series.push((
            Stage::Finetune.label().into(),
            finetune
                .iter()
                .map(|&(e, v)| ((e + offset) as f64, v))
                .collect(),
        ));
    }
    draw(&format!("{}: accuracy", row.name), "accuracy", &series)
}

/// Seed-averaged epoch losses of both stages.
pub fn plot_losses(report: &Report) -> Result<String> {
    let Some(row) = featured(report) else {
        return draw("loss", "loss", &[]);
    };
    let distill = averaged(
        row.seeds
            .iter()
            .flat_map(|s| s.distill.iter().enumerate().map(|(i, b)| (i + 1, b.total))),
    );
    let offset = distill.last().map_or(0, |p| p.0);
    let finetune = averaged(
        row.seeds
            .iter()
            .flat_map(|s| s.finetune.iter().map(|e| (e.epoch + offset, e.total))),
    );
    let mut series: Vec<Series> = vec![(
        "distill".into(),
        distill.iter().map(|&(e, v)| (e as f64, v)).collect(),
    )];
    if !finetune.is_empty() {
        series.push((
            "finetune".into(),
            finetune.iter().map(|&(e, v)| (e as f64, v)).collect(),
        ));
    }
    draw(&format!("{}: loss", row.name), "loss", &series)
}
