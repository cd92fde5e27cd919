//! Static SVG charts: robustness curves for sweep reports and grouped bars
//! for condition grids.

use std::fmt::Write;

use hrlf_core::{ConditionReport, SweepReport};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

struct Frame {
    y_min: f64,
    y_max: f64,
}

impl Frame {
    /// Padded, finite y range covering `values`.
    fn covering(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self { y_min: 0.0, y_max: 1.0 };
        }
        let pad = ((hi - lo) * 0.08).max(0.02);
        Self { y_min: lo - pad, y_max: hi + pad }
    }

    fn x(&self, frac: f64) -> f64 {
        LEFT + frac * (WIDTH - LEFT - RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        let h = HEIGHT - TOP - BOTTOM;
        TOP + h * (1.0 - (v - self.y_min) / (self.y_max - self.y_min))
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(svg: &mut String, title: &str) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
}

fn y_axis(svg: &mut String, f: &Frame, label: &str) {
    let (x0, x1) = (f.x(0.0), f.x(1.0));
    for i in 0..=5 {
        let v = f.y_min + (f.y_max - f.y_min) * i as f64 / 5.0;
        let y = f.y(v);
        let _ = writeln!(svg, r##"<line x1="{x0:.1}" y1="{y:.1}" x2="{x1:.1}" y2="{y:.1}" stroke="#e0e0e0"/>"##);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, x0 - 6.0, y + 4.0);
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{x0:.1}" y1="{:.1}" x2="{x0:.1}" y2="{:.1}" stroke="black"/>"#,
        f.y(f.y_min),
        f.y(f.y_max)
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(18 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (TOP + HEIGHT - BOTTOM) / 2.0,
        escape(label)
    );
}

fn legend(svg: &mut String, names: &[&str]) {
    let x = WIDTH - RIGHT + 16.0;
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 20.0 * i as f64;
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(svg, r#"<rect x="{x:.1}" y="{:.1}" width="14" height="10" fill="{c}"/>"#, y - 9.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, x + 20.0, escape(name));
    }
}

/// One polyline per series over the 11 missing ratios.
pub fn sweep_curves(series: &[(&str, &SweepReport)]) -> String {
    let frame = Frame::covering(series.iter().flat_map(|(_, r)| r.points.iter().map(|p| p.value)));
    let metric = series.first().map_or("metric", |(_, r)| r.metric.name());
    let mut svg = String::new();
    open(&mut svg, "Performance under intra-modality missingness");
    y_axis(&mut svg, &frame, metric);
    let base = frame.y(frame.y_min);
    let _ = writeln!(svg, r#"<line x1="{:.1}" y1="{base:.1}" x2="{:.1}" y2="{base:.1}" stroke="black"/>"#, frame.x(0.0), frame.x(1.0));
    for i in 0..=10 {
        let p = i as f64 / 10.0;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{p:.1}</text>"#, frame.x(p), base + 18.0);
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">missing ratio p</text>"#, frame.x(0.5), HEIGHT - 16.0);
    for (i, (name, report)) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = report.points.iter().map(|p| format!("{:.1},{:.1}", frame.x(p.p), frame.y(p.value))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="series" data-name="{}" points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#,
            escape(name),
            pts.join(" ")
        );
        for p in &report.points {
            let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, frame.x(p.p), frame.y(p.value));
        }
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| *n).collect();
    legend(&mut svg, &names);
    svg.push_str("</svg>\n");
    svg
}

/// Grouped bars: one group per report column, one bar per series.
pub fn grid_bars(series: &[(&str, &ConditionReport)]) -> String {
    let frame = Frame::covering(series.iter().flat_map(|(_, r)| r.columns().into_iter().map(|(_, v)| v)).chain([0.0]));
    let metric = series.first().map_or("metric", |(_, r)| r.metric.name());
    let columns: Vec<String> = series.first().map(|(_, r)| r.columns().into_iter().map(|(l, _)| l).collect()).unwrap_or_default();
    let mut svg = String::new();
    open(&mut svg, "Performance per testing condition");
    y_axis(&mut svg, &frame, metric);
    let zero = frame.y(0.0_f64.max(frame.y_min));
    let _ = writeln!(svg, r#"<line x1="{:.1}" y1="{zero:.1}" x2="{:.1}" y2="{zero:.1}" stroke="black"/>"#, frame.x(0.0), frame.x(1.0));
    let groups = columns.len().max(1) as f64;
    let group_w = 1.0 / groups;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (g, label) in columns.iter().enumerate() {
        let left = g as f64 * group_w + group_w * 0.1;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            frame.x(left + group_w * 0.4),
            HEIGHT - BOTTOM + 18.0,
            escape(label)
        );
        for (s, (name, report)) in series.iter().enumerate() {
            let v = report.columns()[g].1;
            if !v.is_finite() {
                continue;
            }
            let (x0, x1) = (frame.x(left + s as f64 * bar_w), frame.x(left + (s + 1) as f64 * bar_w));
            let (top, bottom) = (frame.y(v).min(zero), frame.y(v).max(zero));
            let _ = writeln!(
                svg,
                r#"<rect class="bar" data-name="{}" x="{x0:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                escape(name),
                x1 - x0,
                bottom - top,
                PALETTE[s % PALETTE.len()]
            );
        }
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| *n).collect();
    legend(&mut svg, &names);
    svg.push_str("</svg>\n");
    svg
}
