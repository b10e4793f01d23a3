//! Static SVG line charts.
//!
//! The canvas is a fixed 1000×600 viewBox. Axis ranges are the exact data
//! extent, so the smallest and largest points land on the plot-area edges.

use std::fmt::Write as _;

pub const WIDTH: f64 = 1000.0;
pub const HEIGHT: f64 = 600.0;
pub const TICKS: usize = 10;

/// Plot area in viewBox units: `(left, top, right, bottom)`.
pub const PLOT_AREA: (f64, f64, f64, f64) = (90.0, 60.0, 960.0, 530.0);

pub const COLOR_A: &str = "#1f77b4";
pub const COLOR_V: &str = "#d62728";
pub const COLOR_JOINT: &str = "#222222";
pub const COLOR_AUX: &str = "#2ca02c";

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub color: &'static str,
    pub dashed: bool,
    /// Non-finite y values break the line.
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: &str, color: &'static str, points: Vec<(f64, f64)>) -> Self {
        Series { label: label.to_string(), color, dashed: false, points }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Range {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            min = min.min(v);
            max = max.max(v);
        }
        if !min.is_finite() {
            return Range { min: 0.0, max: 1.0 };
        }
        if min == max {
            let pad = if min == 0.0 { 1.0 } else { min.abs() * 0.5 };
            return Range { min: min - pad, max: max + pad };
        }
        Range { min, max }
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }
}

/// Maps data coordinates to viewBox coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Transform {
    pub x: Range,
    pub y: Range,
}

impl Transform {
    pub fn for_series(series: &[Series]) -> Transform {
        let pts = || series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
        Transform {
            x: Range::of(pts().map(|p| p.0)),
            y: Range::of(pts().map(|p| p.1)),
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (l, t, r, b) = PLOT_AREA;
        (l + self.x.frac(x) * (r - l), b - self.y.frac(y) * (b - t))
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e4).contains(&a) {
        format!("{v:.2e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Splits a series into runs of finite points.
fn segments(points: &[(f64, f64)]) -> Vec<Vec<(f64, f64)>> {
    let mut out = vec![Vec::new()];
    for &(x, y) in points {
        if x.is_finite() && y.is_finite() {
            out.last_mut().unwrap().push((x, y));
        } else if !out.last().unwrap().is_empty() {
            out.push(Vec::new());
        }
    }
    out.retain(|s| !s.is_empty());
    out
}

pub fn render(chart: &Chart) -> String {
    let tf = Transform::for_series(&chart.series);
    let (l, t, r, b) = PLOT_AREA;
    let mut s = String::new();
    writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="30" text-anchor="middle" font-size="18">{}</text>"#,
        WIDTH / 2.0,
        escape(&chart.title)
    )
    .unwrap();
    writeln!(
        s,
        r##"<rect id="plot-area" x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="#888888"/>"##,
        r - l,
        b - t
    )
    .unwrap();

    s.push_str("<g id=\"x-axis\">\n");
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let px = l + f * (r - l);
        let v = tf.x.min + f * (tf.x.max - tf.x.min);
        writeln!(s, r##"<line x1="{px:.3}" y1="{b}" x2="{px:.3}" y2="{}" stroke="#888888"/>"##, b + 6.0).unwrap();
        writeln!(s, r#"<text x="{px:.3}" y="{}" text-anchor="middle">{}</text>"#, b + 22.0, tick_label(v)).unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (l + r) / 2.0,
        HEIGHT - 20.0,
        escape(&chart.x_label)
    )
    .unwrap();
    s.push_str("</g>\n<g id=\"y-axis\">\n");
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let py = b - f * (b - t);
        let v = tf.y.min + f * (tf.y.max - tf.y.min);
        writeln!(s, r##"<line x1="{}" y1="{py:.3}" x2="{l}" y2="{py:.3}" stroke="#888888"/>"##, l - 6.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{:.3}" text-anchor="end">{}</text>"#, l - 10.0, py + 4.0, tick_label(v)).unwrap();
    }
    writeln!(
        s,
        r#"<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">{}</text>"#,
        (t + b) / 2.0,
        (t + b) / 2.0,
        escape(&chart.y_label)
    )
    .unwrap();
    s.push_str("</g>\n");

    for series in &chart.series {
        let dash = if series.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        writeln!(s, r#"<g class="series" data-label="{}">"#, escape(&series.label)).unwrap();
        for seg in segments(&series.points) {
            let pts: Vec<String> = seg
                .iter()
                .map(|&(x, y)| {
                    let (px, py) = tf.apply(x, y);
                    format!("{px:.3},{py:.3}")
                })
                .collect();
            writeln!(
                s,
                r#"<polyline fill="none" stroke="{}" stroke-width="2"{dash} points="{}"/>"#,
                series.color,
                pts.join(" ")
            )
            .unwrap();
        }
        s.push_str("</g>\n");
    }

    s.push_str("<g id=\"legend\">\n");
    for (i, series) in chart.series.iter().enumerate() {
        let y = t + 16.0 + 18.0 * i as f64;
        let x = r - 170.0;
        let dash = if series.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        writeln!(
            s,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2"{dash}/>"#,
            x + 24.0,
            series.color
        )
        .unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x + 30.0, y + 4.0, escape(&series.label)).unwrap();
    }
    s.push_str("</g>\n</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_series_gets_a_nonempty_range() {
        let r = Range::of([2.0, 2.0].into_iter());
        assert!(r.min < 2.0 && r.max > 2.0);
        let r = Range::of([f64::NAN].into_iter());
        assert_eq!(r, Range { min: 0.0, max: 1.0 });
    }

    #[test]
    fn gaps_split_polylines() {
        let segs = segments(&[(0.0, 1.0), (1.0, f64::NAN), (2.0, 3.0), (3.0, 4.0)]);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[1], vec![(2.0, 3.0), (3.0, 4.0)]);
    }

    #[test]
    fn labels_are_escaped() {
        let chart = Chart {
            title: "a < b & c".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![],
        };
        assert!(render(&chart).contains("a &lt; b &amp; c"));
    }
}
