//! Self-contained SVG line charts for the convergence curves; no external
//! renderer, just axes, tick labels and a polyline.

use crate::error::{invalid, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 50.0;
const TICKS: usize = 5;

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.2e}")
    } else {
        format!("{v:.4}")
    }
}

/// Padded [min, max] of a series; degenerate ranges get a unit pad so the
/// polyline stays visible.
fn axis_range(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

/// Render one metric as an SVG line chart with labelled axes.
pub fn line_chart_svg(title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64)]) -> String {
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (x_lo, x_hi) = axis_range(&xs);
    let (y_lo, y_hi) = axis_range(&ys);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |y: f64| MARGIN_TOP + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"14\">{title}</text>\n",
        WIDTH / 2.0
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        l = MARGIN_LEFT,
        t = MARGIN_TOP,
        b = MARGIN_TOP + plot_h,
        r = MARGIN_LEFT + plot_w
    ));
    for i in 0..=TICKS {
        let frac = i as f64 / TICKS as f64;
        let xv = x_lo + frac * (x_hi - x_lo);
        let yv = y_lo + frac * (y_hi - y_lo);
        let xp = MARGIN_LEFT + frac * plot_w;
        let yp = MARGIN_TOP + plot_h - frac * plot_h;
        svg.push_str(&format!(
            "<line x1=\"{xp}\" y1=\"{b}\" x2=\"{xp}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{xp}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"10\">{}</text>\n",
            MARGIN_TOP + plot_h + 5.0,
            MARGIN_TOP + plot_h + 18.0,
            tick_label(xv),
            b = MARGIN_TOP + plot_h
        ));
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{yp}\" x2=\"{l}\" y2=\"{yp}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"10\">{}</text>\n",
            MARGIN_LEFT - 5.0,
            MARGIN_LEFT - 8.0,
            yp + 3.0,
            tick_label(yv),
            l = MARGIN_LEFT
        ));
    }
    // Axis labels.
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"12\">{xlabel}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"12\" transform=\"rotate(-90 16 {})\">{ylabel}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    ));
    if !points.is_empty() {
        let coords: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"1.5\"/>\n",
            coords.join(" ")
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write `<metric>.svg` under `dir`.
pub fn write_metric_chart(
    dir: &std::path::Path,
    metric: &str,
    points: &[(f64, f64)],
) -> Result<()> {
    if metric.is_empty() {
        return Err(invalid("metric name must be nonempty"));
    }
    let svg = line_chart_svg(metric, "epoch", metric, points);
    std::fs::write(dir.join(format!("{metric}.svg")), svg)?;
    Ok(())
}
