//! Minimal SVG renderings of the CSV artifacts. The CSV is the
//! contract; these are best-effort convenience plots.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 48.0;

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" font-family=\"monospace\" font-size=\"13\" \
         text-anchor=\"middle\">{title}</text>\n",
        WIDTH / 2.0
    )
}

fn axes() -> String {
    format!(
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" \
         stroke=\"#444\" stroke-width=\"1\"/>\n",
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    )
}

fn scale(v: f64, lo: f64, hi: f64, out_lo: f64, out_hi: f64) -> f64 {
    if hi <= lo {
        return (out_lo + out_hi) / 2.0;
    }
    out_lo + (v - lo) / (hi - lo) * (out_hi - out_lo)
}

fn polyline(xs: &[f64], ys: &[f64], bounds: (f64, f64, f64, f64), color: &str) -> String {
    let (x_lo, x_hi, y_lo, y_hi) = bounds;
    let mut pts = String::new();
    for (x, y) in xs.iter().zip(ys) {
        let px = scale(*x, x_lo, x_hi, MARGIN, WIDTH - MARGIN);
        let py = scale(*y, y_lo, y_hi, HEIGHT - MARGIN, MARGIN);
        let _ = write!(pts, "{px:.2},{py:.2} ");
    }
    format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
        pts.trim_end()
    )
}

fn label(text: &str, x: f64, y: f64, color: &str) -> String {
    format!(
        "<text x=\"{x}\" y=\"{y}\" font-family=\"monospace\" font-size=\"11\" \
         fill=\"{color}\">{text}</text>\n"
    )
}

/// Overlayed line plot of named series sharing x positions.
pub fn line_plot(title: &str, xs: &[f64], series: &[(&str, &[f64])]) -> String {
    let colors = ["#1f6fb2", "#d95f02", "#2a9d3a", "#8338ec"];
    let x_lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for (_, ys) in series {
        for &y in ys.iter().filter(|y| y.is_finite()) {
            y_lo = y_lo.min(y);
            y_hi = y_hi.max(y);
        }
    }
    if !y_lo.is_finite() {
        y_lo = 0.0;
        y_hi = 1.0;
    }
    if y_lo == y_hi {
        y_lo -= 0.5;
        y_hi += 0.5;
    }
    let mut out = header(title);
    out.push_str(&axes());
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        out.push_str(&polyline(xs, ys, (x_lo, x_hi, y_lo, y_hi), color));
        out.push_str(&label(name, MARGIN + 6.0, MARGIN + 14.0 + 14.0 * i as f64, color));
    }
    out.push_str(&label(
        &format!("x: [{x_lo:.3}, {x_hi:.3}]  y: [{y_lo:.3}, {y_hi:.3}]"),
        MARGIN,
        HEIGHT - MARGIN / 3.0,
        "#444",
    ));
    out.push_str("</svg>\n");
    out
}

/// Heat map of a row-major 2-D grid.
pub fn heatmap(
    title: &str,
    values: &[f64],
    rows: usize,
    cols: usize,
    bounds: ((f64, f64), (f64, f64)),
) -> String {
    let v_lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let v_hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = header(title);
    let cell_w = (WIDTH - 2.0 * MARGIN) / rows as f64;
    let cell_h = (HEIGHT - 2.0 * MARGIN) / cols as f64;
    for i in 0..rows {
        for j in 0..cols {
            let v = values[i * cols + j];
            let t = if v_hi > v_lo { (v - v_lo) / (v_hi - v_lo) } else { 0.5 };
            // low values dark blue, high values pale yellow
            let r = (40.0 + 215.0 * t) as u8;
            let g = (40.0 + 200.0 * t) as u8;
            let b = (130.0 + 60.0 * (1.0 - t)) as u8;
            let x = MARGIN + i as f64 * cell_w;
            let y = HEIGHT - MARGIN - (j + 1) as f64 * cell_h;
            let _ = write!(
                out,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
                 fill=\"rgb({r},{g},{b})\"/>\n",
                cell_w + 0.5,
                cell_h + 0.5
            );
        }
    }
    out.push_str(&axes());
    let ((x_lo, x_hi), (y_lo, y_hi)) = bounds;
    out.push_str(&label(
        &format!(
            "x: [{x_lo:.3}, {x_hi:.3}]  y: [{y_lo:.3}, {y_hi:.3}]  value: [{v_lo:.3}, {v_hi:.3}]"
        ),
        MARGIN,
        HEIGHT - MARGIN / 3.0,
        "#444",
    ));
    out.push_str("</svg>\n");
    out
}
