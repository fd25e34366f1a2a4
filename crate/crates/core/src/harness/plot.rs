//! SVG plots of accuracy against the swept parameter.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::sweep::SummaryRow;
use crate::error::{Error, Result};

const PALETTE: [RGBColor; 4] = [RGBColor(31, 119, 180), RGBColor(214, 39, 40), RGBColor(44, 160, 44), RGBColor(148, 103, 189)];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::config(format!("plot: {e}"))
}

/// One curve per teacher combination; points without a numeric value or
/// without any successful run are skipped.
pub fn accuracy_plot(
    rows: &[SummaryRow],
    path: &Path,
    title: &str,
    pick: fn(&SummaryRow) -> Option<(f64, f64)>,
) -> Result<()> {
    let mut curves: BTreeMap<&str, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for r in rows {
        if let (Ok(x), Some((m, s))) = (r.value.parse::<f64>(), pick(r)) {
            curves.entry(r.combo.as_str()).or_default().push((x, m, s));
        }
    }
    let xs = curves.values().flatten().map(|p| p.0);
    let (mut lo, mut hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    let param = rows.first().map_or("value", |r| r.parameter.as_str());

    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((lo - pad)..(hi + pad), 0.0..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(param)
        .y_desc("test accuracy")
        .draw()
        .map_err(plot_err)?;
    for (i, (combo, mut pts)) in curves.into_iter().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().map(|p| (p.0, p.1)), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(combo.to_string())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|p| Circle::new((p.0, p.1), 3, color.filled())))
            .map_err(plot_err)?;
        chart
            .draw_series(pts.iter().map(|p| PathElement::new(vec![(p.0, p.1 - p.2), (p.0, p.1 + p.2)], color)))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes `robust_vs_<param>.svg` and `clean_vs_<param>.svg`.
pub fn sweep_plots(rows: &[SummaryRow], dir: &Path) -> Result<Vec<PathBuf>> {
    let param = rows.first().map_or("value".to_string(), |r| r.parameter.replace('.', "_"));
    let robust = dir.join(format!("robust_vs_{param}.svg"));
    let clean = dir.join(format!("clean_vs_{param}.svg"));
    accuracy_plot(rows, &robust, "Test PGD accuracy", |r| r.robust_mean.zip(r.robust_std))?;
    accuracy_plot(rows, &clean, "Test clean accuracy", |r| r.clean_mean.zip(r.clean_std))?;
    Ok(vec![robust, clean])
}
