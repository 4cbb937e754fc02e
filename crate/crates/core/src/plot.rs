//! SVG rendering of closed-loop traces.
//!
//! The figure has two stacked panels sharing the time axis: reference and
//! measured speed on top, raw PI and adjusted quadrature current below. Long
//! traces are decimated by keeping the minimum and maximum of each pixel
//! column, so peaks survive. Numbers are printed with fixed precision, which
//! makes the output byte-identical for identical traces.

use std::fmt::Write as _;
use std::path::Path;

use crate::control::SimTrace;
use crate::error::{Error, Result};

const WIDTH: f64 = 900.0;
const PANEL_HEIGHT: f64 = 260.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const GAP: f64 = 50.0;

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    values: &'a [f64],
}

fn bounds(series: &[Series]) -> (f64, f64) {
    let (lo, hi) = series
        .iter()
        .flat_map(|s| s.values.iter())
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// Indices to draw: the first and last sample plus, per pixel column, the
/// samples holding the column minimum and maximum in time order.
fn decimate(values: &[f64], columns: usize) -> Vec<usize> {
    let n = values.len();
    if n <= 2 * columns {
        return (0..n).collect();
    }
    let mut out = Vec::with_capacity(2 * columns + 2);
    out.push(0);
    for c in 0..columns {
        let a = c * n / columns;
        let b = ((c + 1) * n / columns).max(a + 1);
        let (mut lo, mut hi) = (a, a);
        for k in a..b {
            if values[k] < values[lo] {
                lo = k;
            }
            if values[k] > values[hi] {
                hi = k;
            }
        }
        for k in [lo.min(hi), lo.max(hi)] {
            if out.last() != Some(&k) {
                out.push(k);
            }
        }
    }
    if out.last() != Some(&(n - 1)) {
        out.push(n - 1);
    }
    out
}

fn panel(
    svg: &mut String,
    id: &str,
    title: &str,
    unit: &str,
    top: f64,
    sample_time: f64,
    series: &[Series],
) {
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let n = series[0].values.len();
    let (lo, hi) = bounds(series);
    let x_of = |k: usize| MARGIN_LEFT + plot_w * k as f64 / (n.max(2) - 1) as f64;
    let y_of = |v: f64| top + PANEL_HEIGHT * (hi - v) / (hi - lo);

    let _ = writeln!(svg, r#"<g id="{id}">"#);
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN_LEFT:.1}" y="{top:.1}" width="{plot_w:.1}" height="{PANEL_HEIGHT:.1}" fill="none" stroke="#444"/>"##
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="14">{title}</text>"#,
        MARGIN_LEFT,
        top - 8.0
    );
    for (i, v) in [hi, (hi + lo) / 2.0, lo].into_iter().enumerate() {
        let y = top + PANEL_HEIGHT * i as f64 / 2.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{v:.3}</text>"#,
            MARGIN_LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="12" y="{:.1}" font-size="11" transform="rotate(-90 12 {:.1})">{unit}</text>"#,
        top + PANEL_HEIGHT / 2.0,
        top + PANEL_HEIGHT / 2.0
    );
    let duration = (n.saturating_sub(1)) as f64 * sample_time;
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">t = {duration:.3} s</text>"#,
        WIDTH - MARGIN_RIGHT,
        top + PANEL_HEIGHT + 16.0
    );
    for (i, s) in series.iter().enumerate() {
        let mut pts = String::new();
        for k in decimate(s.values, plot_w as usize) {
            let _ = write!(pts, "{:.2},{:.2} ", x_of(k), y_of(s.values[k]));
        }
        let _ = writeln!(
            svg,
            r#"<polyline class="series" data-label="{}" fill="none" stroke="{}" stroke-width="1" points="{}"/>"#,
            s.label,
            s.color,
            pts.trim_end()
        );
        let ly = top + 16.0 + 16.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT - 150.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{}" stroke-width="2"/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
            lx + 20.0,
            s.color,
            lx + 26.0,
            ly + 4.0,
            s.label
        );
    }
    svg.push_str("</g>\n");
}

/// Render `trace` as an SVG document.
pub fn render_trace_svg(trace: &SimTrace, title: &str) -> Result<String> {
    if trace.is_empty() {
        return Err(Error::Domain("cannot plot an empty trace".into()));
    }
    let height = MARGIN_TOP + 2.0 * PANEL_HEIGHT + GAP + 30.0;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{height:.0}" viewBox="0 0 {WIDTH:.0} {height:.0}" font-family="sans-serif">"#
    );
    let title = escape(title);
    panel(
        &mut svg,
        "speed",
        &format!("{title}: speed"),
        "speed (p.u.)",
        MARGIN_TOP,
        trace.sample_time,
        &[
            Series {
                label: "reference",
                color: "#1f77b4",
                values: &trace.omega_ref,
            },
            Series {
                label: "measured",
                color: "#d62728",
                values: &trace.omega_meas,
            },
        ],
    );
    panel(
        &mut svg,
        "current",
        &format!("{title}: quadrature current"),
        "i_q (A)",
        MARGIN_TOP + PANEL_HEIGHT + GAP,
        trace.sample_time,
        &[
            Series {
                label: "PI output",
                color: "#7f7f7f",
                values: &trace.iq_pi,
            },
            Series {
                label: "adjusted",
                color: "#2ca02c",
                values: &trace.iq_adj,
            },
        ],
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Render `trace` and write it to `path`. Nothing is written for an empty
/// trace.
pub fn plot_trace(trace: &SimTrace, title: &str, path: &Path) -> Result<()> {
    let svg = render_trace_svg(trace, title)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
