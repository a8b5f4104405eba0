//! Static SVG figures: bifurcation diagrams with β-bands and crossing markers,
//! and sample-path plots. Fixed 800×600 canvas, linear axes with 5% margins.

use std::fmt::Write;

use crate::csvio::{PathsTable, SweepTable};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];

/// Data-to-pixel map over the plot area.
#[derive(Debug, Clone, Copy)]
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(xs: impl IntoIterator<Item = f64>, ys: impl IntoIterator<Item = f64>) -> Self {
        Self {
            x: padded(xs),
            y: padded(ys),
        }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn padded(vals: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.into_iter().filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * (1.0 + lo.abs()) {
        let w = 0.5 * (1.0 + lo.abs());
        return (lo - w, hi + w);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
}

fn axes(out: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let _ = writeln!(
        out,
        r#"<rect class="frame" x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y1 - y0
    );
    for i in 0..=4 {
        let v = f.x.0 + (f.x.1 - f.x.0) * i as f64 / 4.0;
        let p = f.px(v);
        let _ = writeln!(
            out,
            r#"<line x1="{p:.2}" y1="{y1}" x2="{p:.2}" y2="{}" stroke="black"/><text x="{p:.2}" y="{}" text-anchor="middle">{}</text>"#,
            y1 + 5.0,
            y1 + 18.0,
            tick(v)
        );
        let v = f.y.0 + (f.y.1 - f.y.0) * i as f64 / 4.0;
        let p = f.py(v);
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{p:.2}" x2="{x0}" y2="{p:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            p + 4.0,
            tick(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text class="xlabel" x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
        0.5 * (x0 + x1),
        HEIGHT - 10.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text class="ylabel" x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">{}</text>"#,
        0.5 * (y0 + y1),
        0.5 * (y0 + y1),
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn points(pts: impl IntoIterator<Item = (f64, f64)>, f: &Frame) -> String {
    pts.into_iter()
        .map(|(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Branch curves of `x_1` against the parameter, shaded `x* ± β` where the
/// equilibrium is nonlinearly mean-square stable, red circles where
/// `λ_max(𝔸)` changes sign.
pub fn bifurcation_svg(table: &SweepTable) -> String {
    let branches = table.branches();
    let beta = |p: &crate::csvio::SweepPoint| p.beta_sq.map(f64::sqrt).filter(|_| p.nonlinear_ms_stable);
    let frame = Frame::fit(
        table.points.iter().map(|p| p.param_value),
        table.points.iter().flat_map(|p| {
            let b = beta(p).unwrap_or(0.0);
            [p.x[0] - b, p.x[0] + b]
        }),
    );
    let mut out = String::new();
    header(&mut out, "bifurcation diagram");
    axes(&mut out, &frame, &table.param_name, "x_1");

    for pts in branches.values() {
        let mut run: Vec<(f64, f64, f64)> = Vec::new();
        let flush = |run: &mut Vec<(f64, f64, f64)>, out: &mut String| {
            if run.len() >= 2 {
                let upper = run.iter().map(|&(p, x, b)| (p, x + b));
                let lower = run.iter().rev().map(|&(p, x, b)| (p, x - b));
                let _ = writeln!(
                    out,
                    r##"<polygon class="band" points="{}" fill="#999999" fill-opacity="0.3" stroke="none"/>"##,
                    points(upper.chain(lower), &frame)
                );
            }
            run.clear();
        };
        for p in pts {
            match beta(p) {
                Some(b) => run.push((p.param_value, p.x[0], b)),
                None => flush(&mut run, &mut out),
            }
        }
        flush(&mut run, &mut out);
    }
    for (i, (id, pts)) in branches.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<polyline class="branch" data-branch="{}" points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            escape(id),
            points(pts.iter().map(|p| (p.param_value, p.x[0])), &frame),
            COLORS[i % COLORS.len()]
        );
    }
    for pts in branches.values() {
        for w in pts.windows(2) {
            let (Some(a), Some(b)) = (w[0].lambda_max_a, w[1].lambda_max_a) else {
                continue;
            };
            if (a < 0.0) != (b < 0.0) {
                let t = if a != b { a / (a - b) } else { 0.5 };
                let p = w[0].param_value + t * (w[1].param_value - w[0].param_value);
                let x = w[0].x[0] + t * (w[1].x[0] - w[0].x[0]);
                let _ = writeln!(
                    out,
                    r#"<circle class="crossing" cx="{:.2}" cy="{:.2}" r="5" fill="red"/>"#,
                    frame.px(p),
                    frame.py(x)
                );
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Reference level drawn on a path plot: an equilibrium and its β when known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Level {
    pub value: f64,
    pub beta: Option<f64>,
}

/// One polyline of `x_1(t)` per path, with horizontal lines at `levels` and
/// their `± β` bands.
pub fn paths_svg(table: &PathsTable, levels: &[Level]) -> String {
    let frame = Frame::fit(
        table.paths.values().flatten().map(|&(t, _)| t),
        table
            .paths
            .values()
            .flatten()
            .map(|&(_, x)| x)
            .chain(levels.iter().flat_map(|l| {
                let b = l.beta.unwrap_or(0.0);
                [l.value - b, l.value + b]
            })),
    );
    let mut out = String::new();
    header(&mut out, "sample paths");
    axes(&mut out, &frame, "t", "x_1");
    let (xa, xb) = (LEFT, WIDTH - RIGHT);
    for l in levels {
        if let Some(b) = l.beta {
            let (top, bottom) = (frame.py(l.value + b), frame.py(l.value - b));
            let _ = writeln!(
                out,
                r##"<rect class="band" x="{xa}" y="{top:.2}" width="{}" height="{:.2}" fill="#999999" fill-opacity="0.3"/>"##,
                xb - xa,
                bottom - top
            );
        }
    }
    for (i, (id, pts)) in table.paths.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<polyline class="path" data-path="{id}" points="{}" fill="none" stroke="{}" stroke-width="1"/>"#,
            points(pts.iter().copied(), &frame),
            COLORS[i % COLORS.len()]
        );
    }
    for l in levels {
        let y = frame.py(l.value);
        let _ = writeln!(
            out,
            r#"<line class="equilibrium" x1="{xa}" y1="{y:.2}" x2="{xb}" y2="{y:.2}" stroke="black" stroke-dasharray="4 3"/>"#
        );
    }
    out.push_str("</svg>\n");
    out
}
