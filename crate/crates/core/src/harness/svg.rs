//! Static SVG line plots: a grid of 600×400 panels, each with polylines and
//! axes labelled at their min and max.

use std::fmt::Write;

use crate::sde::SamplePath;

pub const PANEL_WIDTH: f64 = 600.0;
pub const PANEL_HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
/// Polylines are thinned to at most this many vertices.
const MAX_POINTS: usize = 1000;

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub color: String,
    pub lines: Vec<Vec<(f64, f64)>>,
}

impl Series {
    /// First state coordinate of each path against time.
    pub fn from_paths<'a>(
        label: &str,
        color: &str,
        paths: impl IntoIterator<Item = &'a SamplePath>,
    ) -> Self {
        let lines = paths
            .into_iter()
            .map(|p| {
                p.grid()
                    .nodes()
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| (t, p.state(i)[0]))
                    .collect()
            })
            .collect();
        Self {
            label: label.into(),
            color: color.into(),
            lines,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

impl Panel {
    pub fn new(title: &str, series: Vec<Series>) -> Self {
        Self {
            title: title.into(),
            series,
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in self.series.iter().flat_map(|s| s.lines.iter().flatten()) {
            if x.is_finite() && y.is_finite() {
                b = (b.0.min(x), b.1.max(x), b.2.min(y), b.3.max(y));
            }
        }
        if !b.0.is_finite() {
            return (0.0, 1.0, 0.0, 1.0);
        }
        if b.1 == b.0 {
            b.1 = b.0 + 1.0;
        }
        if b.3 == b.2 {
            b = (b.0, b.1, b.2 - 0.5, b.3 + 0.5);
        }
        b
    }
}

fn thin(line: &[(f64, f64)]) -> impl Iterator<Item = &(f64, f64)> {
    let stride = line.len().div_ceil(MAX_POINTS).max(1);
    let last = line.len().saturating_sub(1);
    line.iter()
        .enumerate()
        .filter(move |(i, _)| i % stride == 0 || *i == last)
        .map(|(_, p)| p)
}

fn render_panel(out: &mut String, panel: &Panel, ox: f64, oy: f64) {
    let (x0, x1, y0, y1) = panel.bounds();
    let (w, h) = (PANEL_WIDTH - 2.0 * MARGIN, PANEL_HEIGHT - 2.0 * MARGIN);
    let px = |x: f64| ox + MARGIN + (x - x0) / (x1 - x0) * w;
    let py = |y: f64| oy + PANEL_HEIGHT - MARGIN - (y - y0) / (y1 - y0) * h;
    let (left, right, top, bottom) = (px(x0), px(x1), py(y1), py(y0));

    let _ = writeln!(
        out,
        r#"<g><text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{}</text>"#,
        ox + PANEL_WIDTH / 2.0,
        oy + 25.0,
        panel.title
    );
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="black" points="{left:.1},{top:.1} {left:.1},{bottom:.1} {right:.1},{bottom:.1}"/>"#
    );
    for (x, label) in [(left, x0), (right, x1)] {
        let _ = writeln!(
            out,
            r#"<line x1="{x:.1}" y1="{bottom:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"#,
            bottom + 5.0,
            bottom + 18.0,
            tick(label)
        );
    }
    for (y, label) in [(bottom, y0), (top, y1)] {
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{left:.1}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"#,
            left - 5.0,
            left - 7.0,
            y + 4.0,
            tick(label)
        );
    }
    for (k, s) in panel.series.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{}">{}</text>"#,
            right - 90.0,
            top + 12.0 + 14.0 * k as f64,
            s.color,
            s.label
        );
        for line in &s.lines {
            out.push_str(r#"<polyline fill="none" stroke-width="1" stroke=""#);
            out.push_str(&s.color);
            out.push_str(r#"" points=""#);
            for (j, &(x, y)) in thin(line).enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{:.2},{:.2}", px(x), py(y));
            }
            out.push_str("\"/>\n");
        }
    }
    out.push_str("</g>\n");
}

fn tick(x: f64) -> String {
    format!("{:.3}", x)
}

/// Lays panels out row-major in `cols` columns.
pub fn render(panels: &[Panel], cols: usize) -> String {
    let cols = cols.max(1);
    let rows = panels.len().div_ceil(cols).max(1);
    let (width, height) = (PANEL_WIDTH * cols as f64, PANEL_HEIGHT * rows as f64);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    out.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    out.push('\n');
    for (k, panel) in panels.iter().enumerate() {
        let ox = PANEL_WIDTH * (k % cols) as f64;
        let oy = PANEL_HEIGHT * (k / cols) as f64;
        render_panel(&mut out, panel, ox, oy);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(n: usize) -> Series {
        Series {
            label: "s".into(),
            color: "red".into(),
            lines: (0..n)
                .map(|k| (0..=10).map(|i| (i as f64 / 10.0, (k * i) as f64)).collect())
                .collect(),
        }
    }

    #[test]
    fn grid_layout_and_counts() {
        let panels: Vec<Panel> = (0..4).map(|k| Panel::new(&format!("p{k}"), vec![series(3)])).collect();
        let svg = render(&panels, 2);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains(r#"width="1200" height="800""#));
        assert_eq!(svg.matches("<g>").count(), 4);
        // 3 data lines plus one axis per panel
        assert_eq!(svg.matches("<polyline").count(), 16);
        assert!(svg.contains(">20.000<"));
        assert_eq!(svg, render(&panels, 2));
    }

    #[test]
    fn long_lines_are_thinned_but_keep_endpoints() {
        let line: Vec<(f64, f64)> = (0..=5000).map(|i| (i as f64, 0.0)).collect();
        let kept: Vec<_> = thin(&line).collect();
        assert!(kept.len() <= MAX_POINTS + 1);
        assert_eq!(kept.first().unwrap().0, 0.0);
        assert_eq!(kept.last().unwrap().0, 5000.0);
    }

    #[test]
    fn degenerate_bounds() {
        let p = Panel::new("flat", vec![Series { label: "c".into(), color: "k".into(), lines: vec![vec![(0.0, 1.0), (1.0, 1.0)]] }]);
        assert_eq!(p.bounds(), (0.0, 1.0, 0.5, 1.5));
        assert_eq!(Panel::new("empty", vec![]).bounds(), (0.0, 1.0, 0.0, 1.0));
    }
}
