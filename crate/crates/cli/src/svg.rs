//! Minimal static SVG line charts for loss histories and error curves.
//! Deterministic output: fixed canvas, fixed palette, fixed float formatting.

use std::io::Write;
use std::path::Path;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 48.0;
const MARGIN_BOTTOM: f64 = 56.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let mut x = (f64::INFINITY, f64::NEG_INFINITY);
    let mut y = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(px, py) in &s.points {
            x = (x.0.min(px), x.1.max(px));
            y = (y.0.min(py), y.1.max(py));
        }
    }
    if !x.0.is_finite() || !x.1.is_finite() {
        x = (0.0, 1.0);
    }
    if !y.0.is_finite() || !y.1.is_finite() {
        y = (0.0, 1.0);
    }
    if x.0 == x.1 {
        x = (x.0 - 0.5, x.1 + 0.5);
    }
    if y.0 == y.1 {
        y = (y.0 - 0.5, y.1 + 0.5);
    }
    (x, y)
}

/// Writes a fixed-size line chart. Intended for quick inspection of results,
/// not publication: one frame, linear axes, min/max tick labels.
pub fn write_line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> std::io::Result<()> {
    let ((x0, x1), (y0, y1)) = bounds(series);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let map_x = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
    let map_y = |y: f64| MARGIN_TOP + plot_h - (y - y0) / (y1 - y0) * plot_h;

    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )?;
    writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#)?;
    writeln!(
        w,
        r##"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444" stroke-width="1"/>"##
    )?;
    writeln!(
        w,
        r#"<text x="{:.1}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    )?;
    writeln!(
        w,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    )?;
    writeln!(
        w,
        r#"<text x="18" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    )?;
    // Axis extremes.
    for (value, x, y, anchor) in [
        (x0, MARGIN_LEFT, HEIGHT - MARGIN_BOTTOM + 16.0, "middle"),
        (x1, WIDTH - MARGIN_RIGHT, HEIGHT - MARGIN_BOTTOM + 16.0, "middle"),
        (y0, MARGIN_LEFT - 6.0, HEIGHT - MARGIN_BOTTOM, "end"),
        (y1, MARGIN_LEFT - 6.0, MARGIN_TOP + 4.0, "end"),
    ] {
        writeln!(
            w,
            r#"<text x="{x:.1}" y="{y:.1}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{value:.4}</text>"#
        )?;
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", map_x(x), map_y(y)))
            .collect();
        writeln!(
            w,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            coords.join(" ")
        )?;
        let legend_y = MARGIN_TOP + 16.0 + 16.0 * i as f64;
        writeln!(
            w,
            r#"<line x1="{:.1}" y1="{legend_y:.1}" x2="{:.1}" y2="{legend_y:.1}" stroke="{color}" stroke-width="2"/>"#,
            WIDTH - MARGIN_RIGHT - 120.0,
            WIDTH - MARGIN_RIGHT - 96.0
        )?;
        writeln!(
            w,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12">{}</text>"#,
            WIDTH - MARGIN_RIGHT - 90.0,
            legend_y + 4.0,
            escape(&s.label)
        )?;
    }
    writeln!(w, "</svg>")?;
    w.flush()
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
