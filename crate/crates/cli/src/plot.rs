//! Minimal static SVG charts. Output depends only on the input values, so
//! plots of one checkpoint are byte-stable.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Maps data ranges onto the plotting area. Degenerate ranges are widened so
/// every mapping is finite.
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let widen = |(lo, hi): (f64, f64)| {
            if !(lo.is_finite() && hi.is_finite()) {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Frame { x: widen(x), y: widen(y) }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn open(&self, out: &mut String, title: &str, x_label: &str, y_label: &str) {
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(title)
        );
        let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(
            out,
            r#"<path d="M{x0},{y0} L{x0},{y1} L{x1},{y1}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 15.0,
            escape(x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(y_label)
        );
        for k in 0..=4 {
            let v = self.y.0 + (self.y.1 - self.y.0) * k as f64 / 4.0;
            let y = self.py(v);
            let _ = writeln!(
                out,
                r#"<line x1="{}" y1="{y:.1}" x2="{x0}" y2="{y:.1}" stroke="black"/><text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
                x0 - 4.0,
                x0 - 6.0,
                y + 4.0,
                tick(v)
            );
        }
    }

    fn x_ticks(&self, out: &mut String) {
        for k in 0..=4 {
            let v = self.x.0 + (self.x.1 - self.x.0) * k as f64 / 4.0;
            let x = self.px(v);
            let y = HEIGHT - MARGIN;
            let _ = writeln!(
                out,
                r#"<line x1="{x:.1}" y1="{y}" x2="{x:.1}" y2="{}" stroke="black"/><text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#,
                y + 4.0,
                y + 18.0,
                tick(v)
            );
        }
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let frame = Frame::new(bounds(all().map(|p| p.0)), bounds(all().map(|p| p.1)));
    let mut out = String::new();
    frame.open(&mut out, title, x_label, y_label);
    frame.x_ticks(&mut out);
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", frame.px(x), frame.py(y)))
            .collect();
        if !path.is_empty() {
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                path.join(" ")
            );
        }
        let ly = MARGIN + 16.0 * i as f64;
        let lx = WIDTH - MARGIN - 150.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Equal-width histogram over `[lo, hi]`; values outside are clamped into
/// the edge bins.
pub fn histogram(title: &str, x_label: &str, values: &[f64], lo: f64, hi: f64, bins: usize) -> String {
    assert!(bins > 0 && hi > lo, "histogram needs a non-empty range");
    let mut counts = vec![0usize; bins];
    for &v in values.iter().filter(|v| v.is_finite()) {
        let b = (((v - lo) / (hi - lo)) * bins as f64).floor();
        counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let frame = Frame::new((lo, hi), (0.0, top));
    let mut out = String::new();
    frame.open(&mut out, title, x_label, "count");
    frame.x_ticks(&mut out);
    let width = (hi - lo) / bins as f64;
    for (b, &c) in counts.iter().enumerate() {
        let x0 = frame.px(lo + width * b as f64);
        let x1 = frame.px(lo + width * (b + 1) as f64);
        let y = frame.py(c as f64);
        let _ = writeln!(
            out,
            r#"<rect x="{x0:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="{}" stroke="white"/>"#,
            x1 - x0,
            frame.py(0.0) - y,
            COLORS[0]
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Categorical scatter: one vertical band per group with deterministic
/// horizontal jitter.
pub fn strip_chart(title: &str, y_label: &str, groups: &[(String, Vec<f64>)]) -> String {
    let frame = Frame::new(
        (0.0, groups.len().max(1) as f64),
        bounds(groups.iter().flat_map(|g| g.1.iter().copied())),
    );
    let mut out = String::new();
    frame.open(&mut out, title, "label", y_label);
    for (g, (name, values)) in groups.iter().enumerate() {
        let color = COLORS[g % COLORS.len()];
        let center = g as f64 + 0.5;
        for (i, &v) in values.iter().enumerate().filter(|(_, v)| v.is_finite()) {
            // golden-ratio sequence spreads points evenly across the band
            let jitter = ((i as f64 * 0.618_033_988_75).fract() - 0.5) * 0.6;
            let _ = writeln!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="2" fill="{color}" fill-opacity="0.5"/>"#,
                frame.px(center + jitter),
                frame.py(v)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{} (n={})</text>"#,
            frame.px(center),
            HEIGHT - MARGIN + 18.0,
            escape(name),
            values.len()
        );
    }
    out.push_str("</svg>\n");
    out
}
