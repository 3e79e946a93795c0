use std::path::Path;

use plotters::prelude::*;

use super::EvalError;
use crate::training::{EpochRecord, RunHistory};

pub const HISTORY_COLUMNS: [&str; 8] =
    ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr", "ce_part", "kl_part"];

/// Writes one row per epoch under a fixed header. Floats use the shortest
/// representation that round-trips exactly.
pub fn history_to_csv(history: &RunHistory) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(HISTORY_COLUMNS).expect("in-memory write");
    for r in &history.records {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

pub fn parse_history_csv(text: &str) -> Result<RunHistory, EvalError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| EvalError::Format(e.to_string()))?;
    if headers.iter().ne(HISTORY_COLUMNS) {
        return Err(EvalError::Format(format!("unexpected history header {:?}", headers.iter().collect::<Vec<_>>())));
    }
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<EpochRecord>().enumerate() {
        let r = row.map_err(|e| EvalError::Format(format!("row {}: {e}", i + 1)))?;
        records.push(r);
    }
    Ok(RunHistory { records })
}

pub fn read_history(path: &Path) -> Result<RunHistory, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
    parse_history_csv(&text)
}

pub fn write_history(history: &RunHistory, path: &Path) -> Result<(), EvalError> {
    std::fs::write(path, history_to_csv(history)).map_err(|e| EvalError::io(path, e))
}

/// Two panels side by side: train/val accuracy, and val loss.
pub fn render_curves(history: &RunHistory, svg_path: &Path) -> Result<(), EvalError> {
    if history.is_empty() {
        return Err(EvalError::Empty);
    }
    let plot = |e: &dyn std::fmt::Display| EvalError::Plot(e.to_string());
    let n = history.len() as f64;
    let x_range = 0.5..n + 0.5;
    let root = SVGBackend::new(svg_path, (1000, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot(&e))?;
    let (left, right) = root.split_horizontally(500);

    let mut acc = ChartBuilder::on(&left)
        .caption("accuracy", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(x_range.clone(), 0.0..1.0)
        .map_err(|e| plot(&e))?;
    acc.configure_mesh().x_desc("epoch").draw().map_err(|e| plot(&e))?;
    for (label, color, get) in [
        ("train", RED, (|r: &EpochRecord| r.train_acc) as fn(&EpochRecord) -> f64),
        ("val", BLUE, |r: &EpochRecord| r.val_acc),
    ] {
        let pts: Vec<(f64, f64)> = history.records.iter().map(|r| (r.epoch as f64, get(r))).collect();
        acc.draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| plot(&e))?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        acc.draw_series(pts.into_iter().map(|p| Circle::new(p, 2, color.filled()))).map_err(|e| plot(&e))?;
    }
    acc.configure_series_labels().border_style(BLACK).draw().map_err(|e| plot(&e))?;

    let max_loss = history.records.iter().map(|r| r.val_loss).fold(0.0, f64::max);
    let mut loss = ChartBuilder::on(&right)
        .caption("validation loss", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(x_range, 0.0..(max_loss * 1.1).max(1e-6))
        .map_err(|e| plot(&e))?;
    loss.configure_mesh().x_desc("epoch").draw().map_err(|e| plot(&e))?;
    let pts: Vec<(f64, f64)> = history.records.iter().map(|r| (r.epoch as f64, r.val_loss)).collect();
    loss.draw_series(LineSeries::new(pts.clone(), BLUE.stroke_width(2))).map_err(|e| plot(&e))?;
    loss.draw_series(pts.into_iter().map(|p| Circle::new(p, 2, BLUE.filled()))).map_err(|e| plot(&e))?;
    root.present().map_err(|e| plot(&e))
}

/// Writes `<stem>.csv` and `<stem>.svg` next to each other.
pub fn export_curves(
    history: &RunHistory,
    out_stem: &Path,
) -> Result<(std::path::PathBuf, std::path::PathBuf), EvalError> {
    if history.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(dir) = out_stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| EvalError::io(dir, e))?;
    }
    let csv_path = out_stem.with_extension("csv");
    let svg_path = out_stem.with_extension("svg");
    write_history(history, &csv_path)?;
    render_curves(history, &svg_path)?;
    Ok((csv_path, svg_path))
}
