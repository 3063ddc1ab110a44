//! Files a training run leaves behind besides the core log and checkpoints.

use std::fs;
use std::path::Path;

use plotters::prelude::*;
use resvm::training::{LogRecord, Metrics, TrainSummary};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// `summary.json`: final metrics for both the raw and the EMA weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub preset: String,
    pub variant: String,
    pub num_params: usize,
    pub num_classes: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub epochs: usize,
    pub steps: usize,
    pub first_step_loss: f64,
    pub last_step_loss: f64,
    pub initial_train: Metrics,
    pub final_train: Metrics,
    pub final_ema_train: Metrics,
    pub final_val: Option<Metrics>,
    pub final_ema_val: Option<Metrics>,
    pub best_val_top1: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Unsmoothed train loss before training over after it.
    pub train_loss_ratio: f64,
}

impl RunSummary {
    pub fn from_train(
        s: &TrainSummary,
        preset: &str,
        variant: &str,
        num_params: usize,
        num_classes: usize,
        sizes: (usize, usize),
    ) -> Self {
        Self {
            preset: preset.into(),
            variant: variant.into(),
            num_params,
            num_classes,
            train_images: sizes.0,
            val_images: sizes.1,
            epochs: s.epochs,
            steps: s.steps,
            first_step_loss: s.step_losses.first().copied().unwrap_or(f64::NAN),
            last_step_loss: s.step_losses.last().copied().unwrap_or(f64::NAN),
            initial_train: s.initial_train,
            final_train: s.final_train,
            final_ema_train: s.final_ema_train,
            final_val: s.final_val,
            final_ema_val: s.final_ema_val,
            best_val_top1: s.best_val_top1,
            best_epoch: s.best_epoch,
            train_loss_ratio: s.initial_train.loss / s.final_train.loss,
        }
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
struct StepRow {
    step: usize,
    epoch: usize,
    lr: f64,
    loss: f64,
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    step: usize,
    lr: f64,
    loss: f64,
    train_top1: Option<f64>,
    val_top1: Option<f64>,
    val_top5: Option<f64>,
    ema_top1: Option<f64>,
    ema_top5: Option<f64>,
    wall_time: f64,
}

fn write_rows<T: Serialize>(rows: impl IntoIterator<Item = T>, path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| CliError::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// `loss.csv` (one row per step) and `metrics.csv` (one row per epoch).
pub fn write_curves(log: &[LogRecord], dir: &Path) -> Result<()> {
    let steps = log.iter().filter_map(|r| match *r {
        LogRecord::Step {
            epoch,
            step,
            lr,
            loss,
        } => Some(StepRow {
            step,
            epoch,
            lr,
            loss,
        }),
        LogRecord::Epoch { .. } => None,
    });
    write_rows(steps, &dir.join("loss.csv"))?;
    let epochs = log.iter().filter_map(|r| match *r {
        LogRecord::Epoch {
            epoch,
            step,
            lr,
            loss,
            val_top1,
            val_top5,
            ema_top1,
            ema_top5,
            train_top1,
            wall_time,
        } => Some(EpochRow {
            epoch,
            step,
            lr,
            loss,
            train_top1,
            val_top1,
            val_top5,
            ema_top1,
            ema_top5,
            wall_time,
        }),
        LogRecord::Step { .. } => None,
    });
    write_rows(epochs, &dir.join("metrics.csv"))
}

const CURVE_COLORS: [RGBColor; 4] = [BLUE, RED, GREEN, MAGENTA];

fn draw_panel<DB: DrawingBackend>(
    area: &DrawingArea<DB, plotters::coord::Shift>,
    series: &[Vec<(f64, f64)>],
    y_range: (f64, f64),
) -> Result<(), String> {
    let x_max = series.iter().flatten().map(|p| p.0).fold(1.0, f64::max);
    let mut chart = ChartBuilder::on(area)
        .margin(12)
        .build_cartesian_2d(0.0..x_max, y_range.0..y_range.1)
        .map_err(|e| e.to_string())?;
    chart
        .plotting_area()
        .draw(&Rectangle::new(
            [(0.0, y_range.0), (x_max, y_range.1)],
            BLACK.stroke_width(1),
        ))
        .map_err(|e| e.to_string())?;
    for (points, color) in series.iter().zip(CURVE_COLORS.iter().cycle()) {
        chart
            .draw_series(LineSeries::new(
                points.iter().copied(),
                color.stroke_width(2),
            ))
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// `loss.png`: step loss on top; train, val and EMA top-1 in [0, 1] below.
/// Unlabelled so it needs no font stack; the CSVs carry the numbers.
pub fn plot_curves(log: &[LogRecord], path: &Path) -> Result<()> {
    let losses: Vec<(f64, f64)> = log
        .iter()
        .filter_map(|r| match *r {
            LogRecord::Step { step, loss, .. } => Some((step as f64, loss)),
            LogRecord::Epoch { .. } => None,
        })
        .collect();
    let mut acc: [Vec<(f64, f64)>; 3] = Default::default();
    for r in log {
        if let LogRecord::Epoch {
            epoch,
            train_top1,
            val_top1,
            ema_top1,
            ..
        } = *r
        {
            let x = (epoch + 1) as f64;
            for (curve, v) in acc.iter_mut().zip([train_top1, val_top1, ema_top1]) {
                if let Some(v) = v {
                    curve.push((x, v));
                }
            }
        }
    }
    let loss_max = losses.iter().map(|p| p.1).fold(1e-3, f64::max) * 1.05;

    let render = || -> Result<(), String> {
        let root = BitMapBackend::new(path, (800, 600)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| e.to_string())?;
        let (top, bottom) = root.split_vertically(300);
        draw_panel(&top, &[losses], (0.0, loss_max))?;
        draw_panel(&bottom, &acc, (0.0, 1.0))?;
        root.present().map_err(|e| e.to_string())
    };
    render().map_err(|e| CliError::io(path, std::io::Error::other(e)))
}
