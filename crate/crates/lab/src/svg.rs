//! Minimal SVG plots with fixed-precision coordinates, so output is stable
//! across runs and diffs cleanly.

use std::fmt::Write;

use crate::manifest::FORMAT_VERSION;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;

const PALETTE: [&str; 8] = [
    "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        let pad = |a: f64, b: f64| if b - a < 1e-12 { (a - 0.5, b + 0.5) } else { (a, b) };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn open(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" data-format=\"{FORMAT_VERSION}\">"
    );
    let _ = writeln!(out, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>",
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#444\"/>",
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
        WIDTH / 2.0,
        HEIGHT - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 {:.2})\">{}</text>",
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
}

fn ticks(out: &mut String, frame: &Frame, y_fmt: impl Fn(f64) -> String) {
    for (v, anchor, x, y) in [
        (frame.x0, "start", MARGIN, HEIGHT - MARGIN + 16.0),
        (frame.x1, "end", WIDTH - MARGIN, HEIGHT - MARGIN + 16.0),
    ] {
        let _ = writeln!(out, "<text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"{anchor}\" font-size=\"10\">{v:.3}</text>");
    }
    for (v, y) in [(frame.y0, HEIGHT - MARGIN), (frame.y1, MARGIN + 10.0)] {
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{y:.2}\" text-anchor=\"end\" font-size=\"10\">{}</text>",
            MARGIN - 4.0,
            y_fmt(v)
        );
    }
}

fn legend(out: &mut String, labels: &[String]) {
    for (i, label) in labels.iter().enumerate() {
        let y = MARGIN + 14.0 + 16.0 * i as f64;
        let x = WIDTH - MARGIN - 110.0;
        let _ = writeln!(out, "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{}\"/>", y - 9.0, color(i));
        let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{y:.2}\" font-size=\"11\">{}</text>", x + 14.0, escape(label));
    }
}

/// Scatter of 2-D points, colored by `classes[i]` with legend `labels`.
pub fn scatter(title: &str, points: &[[f64; 2]], classes: &[usize], labels: &[String]) -> String {
    let frame = Frame::fit(points.iter().map(|p| (p[0], p[1])));
    let mut out = String::new();
    open(&mut out, title, "PC 1", "PC 2");
    ticks(&mut out, &frame, |v| format!("{v:.3}"));
    let _ = writeln!(out, "<g class=\"points\">");
    for (p, &c) in points.iter().zip(classes) {
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.8\"/>",
            frame.px(p[0]),
            frame.py(p[1]),
            color(c)
        );
    }
    let _ = writeln!(out, "</g>");
    legend(&mut out, labels);
    out.push_str("</svg>\n");
    out
}

/// Line plot of several `(x, y)` series. With `log_y`, values are plotted as
/// `log10(max(y, floor))`.
pub fn lines(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)], log_y: bool) -> String {
    let floor = 1e-300;
    let tf = |y: f64| if log_y { y.max(floor).log10() } else { y };
    let frame = Frame::fit(series.iter().flat_map(|(_, s)| s.iter().map(|&(x, y)| (x, tf(y)))));
    let mut out = String::new();
    open(&mut out, title, x_label, y_label);
    ticks(&mut out, &frame, |v| if log_y { format!("1e{v:.1}") } else { format!("{v:.3}") });
    for (i, (name, s)) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(tf(y))))
            .collect();
        let _ = writeln!(
            out,
            "<polyline class=\"series\" data-name=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
            escape(name),
            color(i),
            pts.join(" ")
        );
    }
    let names: Vec<String> = series.iter().map(|(n, _)| n.clone()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}
