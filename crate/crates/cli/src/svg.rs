//! Minimal SVG output for scatter plots and line charts.

use std::fmt::Write;

pub const SIZE: f64 = 600.0;
/// Padding around the data extent, in data units.
pub const PADDING: f64 = 2.0;

pub const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub fn color(group: usize) -> &'static str {
    PALETTE[group % PALETTE.len()]
}

/// Maps data coordinates onto the square viewport with `y` pointing up.
struct Frame {
    x0: f64,
    y0: f64,
    scale_x: f64,
    scale_y: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>, padding: f64, equal_aspect: bool) -> Self {
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        if !xmin.is_finite() {
            (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
        }
        let (xmin, xmax, ymin, ymax) = (xmin - padding, xmax + padding, ymin - padding, ymax + padding);
        let mut span_x = (xmax - xmin).max(1e-12);
        let mut span_y = (ymax - ymin).max(1e-12);
        let (mut cx, mut cy) = (xmin, ymin);
        if equal_aspect {
            let span = span_x.max(span_y);
            cx -= (span - span_x) / 2.0;
            cy -= (span - span_y) / 2.0;
            span_x = span;
            span_y = span;
        }
        Self {
            x0: cx,
            y0: cy,
            scale_x: SIZE / span_x,
            scale_y: SIZE / span_y,
        }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) * self.scale_x, SIZE - (y - self.y0) * self.scale_y)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(out, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#);
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Scatter plot with one `<g>` per group, each in its own fill color.
pub fn scatter(title: &str, groups: &[(String, Vec<[f64; 2]>)]) -> String {
    let frame = Frame::fit(
        groups.iter().flat_map(|(_, pts)| pts.iter().map(|p| (p[0], p[1]))),
        PADDING,
        true,
    );
    let mut out = String::new();
    header(&mut out, title);
    for (g, (label, pts)) in groups.iter().enumerate() {
        let _ = writeln!(out, r#"<g class="group" data-label="{}" fill="{}">"#, escape(label), color(g));
        for p in pts.iter().filter(|p| p[0].is_finite() && p[1].is_finite()) {
            let (x, y) = frame.map(p[0], p[1]);
            let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.5"/>"#);
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

/// Line chart with one polyline per series; `y` is framed on `[0, 1]`.
pub fn unit_lines(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let xs = series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.0));
    let corners: Vec<(f64, f64)> = xs.flat_map(|x| [(x, 0.0), (x, 1.0)]).collect();
    let frame = Frame::fit(corners.into_iter(), 0.0, false);
    let mut out = String::new();
    header(&mut out, title);
    for (g, (label, pts)) in series.iter().enumerate() {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let (px, py) = frame.map(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<g class="series" data-label="{}"><polyline fill="none" stroke="{}" stroke-width="2" points="{}"/></g>"#,
            escape(label),
            color(g),
            coords.join(" ")
        );
    }
    out.push_str("</svg>\n");
    out
}
