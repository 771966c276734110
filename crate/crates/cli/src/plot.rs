//! Error-curve PNGs from a training history.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gaze_core::train::TrainHistory;
use plotters::prelude::*;

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/System/Library/Fonts/Supplemental/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Registers a TTF for axis labels. `GAZE_FONT` overrides the search; with
/// no font found the chart is drawn without text.
fn register_font() -> bool {
    let mut paths: Vec<PathBuf> = std::env::var_os("GAZE_FONT").map(PathBuf::from).into_iter().collect();
    paths.extend(FONT_CANDIDATES.iter().map(PathBuf::from));
    for p in paths {
        if let Ok(bytes) = std::fs::read(&p) {
            let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
            if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                return true;
            }
        }
    }
    false
}

/// Train loss (left axis) and validation error (right axis) per epoch.
pub fn plot_history(history: &TrainHistory, out: &Path) -> Result<()> {
    if history.epochs.is_empty() {
        bail!("history has no epochs");
    }
    let text = register_font();
    let loss: Vec<(f64, f64)> = history.epochs.iter().map(|e| (e.epoch as f64, e.train_loss)).collect();
    let val: Vec<(f64, f64)> = history
        .epochs
        .iter()
        .filter_map(|e| e.val_mean_error_cm.map(|v| (e.epoch as f64, v)))
        .collect();
    let x_max = (history.epochs.len() as f64 - 1.0).max(1.0);
    let top = |pts: &[(f64, f64)]| pts.iter().map(|p| p.1).filter(|v| v.is_finite()).fold(0.0, f64::max) * 1.05 + 1e-9;

    let root = BitMapBackend::new(out, (900, 540)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(16);
    if text {
        builder
            .caption("Training curves", ("sans-serif", 22))
            .x_label_area_size(40)
            .y_label_area_size(60)
            .right_y_label_area_size(60);
    }
    let mut chart = builder
        .build_cartesian_2d(0.0..x_max, 0.0..top(&loss))?
        .set_secondary_coord(0.0..x_max, 0.0..top(&val).max(1.0));
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc("epoch").y_desc("train loss");
    } else {
        mesh.disable_x_mesh().disable_y_mesh().x_labels(0).y_labels(0);
    }
    mesh.draw()?;
    if text {
        chart.configure_secondary_axes().y_desc("val mean error (cm)").draw()?;
    }
    let loss_series = chart.draw_series(LineSeries::new(loss, BLUE.stroke_width(2)))?;
    if text {
        loss_series.label("train loss").legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLUE.stroke_width(2)));
    }
    let val_series = chart.draw_secondary_series(LineSeries::new(val, RED.stroke_width(2)))?;
    if text {
        val_series
            .label("val error (cm)")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], RED.stroke_width(2)));
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
    }
    root.present().with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
