//! Static loss and accuracy curves.

use std::path::Path;

use distillkit::train::EpochRecord;
use plotters::prelude::*;

use crate::CliError;

type Series = (&'static str, fn(&EpochRecord) -> f64, RGBColor);

fn draw_err<E: std::fmt::Debug>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("cannot draw {}: {e:?}", path.display()))
}

/// Two panels: losses per epoch on the left, test Top-1/Top-5 on the right.
pub fn write_curves(path: &Path, title: &str, history: &[EpochRecord]) -> Result<(), CliError> {
    let err = draw_err(path);
    let root = SVGBackend::new(path, (960, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let root = root.titled(title, ("sans-serif", 20)).map_err(&err)?;
    let (left, right) = root.split_horizontally(480);
    let last_epoch = history.last().map_or(1, |r| r.epoch.max(1)) as f64;

    let series: [Series; 3] = [
        ("l_total", |r| r.l_total, BLACK),
        ("l_task", |r| r.l_task, BLUE),
        ("l_kd", |r| r.l_kd, RED),
    ];
    let loss_max = history
        .iter()
        .flat_map(|r| series.iter().map(move |(_, f, _)| f(r)))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-6);
    let mut chart = ChartBuilder::on(&left)
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .caption("loss", ("sans-serif", 16))
        .build_cartesian_2d(0.0..last_epoch, 0.0..loss_max * 1.05)
        .map_err(&err)?;
    chart.configure_mesh().x_desc("epoch").draw().map_err(&err)?;
    for (name, f, color) in series {
        chart
            .draw_series(LineSeries::new(history.iter().map(|r| (r.epoch as f64, f(r))), color))
            .map_err(&err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).draw().map_err(&err)?;

    let mut chart = ChartBuilder::on(&right)
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .caption("test accuracy", ("sans-serif", 16))
        .build_cartesian_2d(0.0..last_epoch, 0.0..1.0)
        .map_err(&err)?;
    chart.configure_mesh().x_desc("epoch").draw().map_err(&err)?;
    let acc: [Series; 2] = [("top1", |r| r.top1, BLUE), ("top5", |r| r.top5, GREEN)];
    for (name, f, color) in acc {
        chart
            .draw_series(LineSeries::new(history.iter().map(|r| (r.epoch as f64, f(r))), color))
            .map_err(&err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).draw().map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}
