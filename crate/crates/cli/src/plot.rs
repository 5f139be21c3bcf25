use std::path::Path;

use negolab_core::experiment::TraceRow;
use plotters::prelude::*;

const PANELS: [(&str, fn(&TraceRow) -> Option<f64>); 4] = [
    ("advantage", |r| Some(r.advantage)),
    ("pareto", |r| r.pareto),
    ("agreement", |r| Some(r.agreement)),
    ("novelty", |r| r.novelty),
];

/// Four panels (advantage, Pareto rate, agreement, novelty against
/// epoch), one line per labelled trace.
pub fn plot_traces(series: &[(String, Vec<TraceRow>)], out: &Path) -> Result<(), String> {
    let fail = |e: &dyn std::fmt::Display| format!("plotting {}: {e}", out.display());
    let root = SVGBackend::new(out, (1200, 900)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fail(&e))?;
    let max_epoch = series.iter().flat_map(|(_, rows)| rows.iter().map(|r| r.epoch)).max().unwrap_or(1).max(1);
    for (area, (name, metric)) in root.split_evenly((2, 2)).iter().zip(PANELS) {
        let values: Vec<f64> = series.iter().flat_map(|(_, rows)| rows.iter().filter_map(metric)).collect();
        let (mut lo, mut hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        let pad = ((hi - lo) * 0.1).max(0.05);
        let mut chart = ChartBuilder::on(area)
            .caption(name, ("sans-serif", 22))
            .margin(12)
            .x_label_area_size(30)
            .y_label_area_size(45)
            .build_cartesian_2d(0f64..max_epoch as f64, (lo - pad)..(hi + pad))
            .map_err(|e| fail(&e))?;
        chart.configure_mesh().x_desc("epoch").draw().map_err(|e| fail(&e))?;
        for (i, (label, rows)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let points: Vec<(f64, f64)> =
                rows.iter().filter_map(|r| metric(r).map(|v| (r.epoch as f64, v))).collect();
            chart
                .draw_series(LineSeries::new(points, color.stroke_width(2)))
                .map_err(|e| fail(&e))?
                .label(label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| fail(&e))?;
    }
    root.present().map_err(|e| fail(&e))?;
    Ok(())
}
