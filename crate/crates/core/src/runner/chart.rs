//! Minimal SVG line charts. Several panels can share one document, side by
//! side. Missing values break a line instead of being interpolated.

use std::fmt::Write;

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const LEGEND_ROW: f64 = 18.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Fixed y range; otherwise fitted to the data.
    pub y_range: Option<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn panel(out: &mut String, p: &Panel, ox: f64) {
    let plot_w = PANEL_W - MARGIN_L - MARGIN_R;
    let plot_h = PANEL_H - MARGIN_T - MARGIN_B;
    let (x0, x1) = range(p.series.iter().flat_map(|s| s.points.iter().map(|pt| pt.0)));
    let (y0, y1) = p
        .y_range
        .unwrap_or_else(|| range(p.series.iter().flat_map(|s| s.points.iter().filter_map(|pt| pt.1))));
    let sx = |x: f64| ox + MARGIN_L + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| MARGIN_T + plot_h - (y - y0) / (y1 - y0) * plot_h;

    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        fmt_num(ox + MARGIN_L + plot_w / 2.0),
        escape(&p.title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        fmt_num(ox + MARGIN_L),
        fmt_num(MARGIN_T),
        fmt_num(plot_w),
        fmt_num(plot_h)
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
            fmt_num(sx(fx)),
            fmt_num(MARGIN_T + plot_h + 14.0),
            fmt_num(fx)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{}</text>"#,
            fmt_num(ox + MARGIN_L - 4.0),
            fmt_num(sy(fy) + 3.0),
            fmt_num(fy)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
        fmt_num(ox + MARGIN_L + plot_w / 2.0),
        fmt_num(MARGIN_T + plot_h + 34.0),
        escape(&p.x_label)
    );
    let cy = MARGIN_T + plot_h / 2.0;
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 {} {})">{}</text>"#,
        fmt_num(ox + 16.0),
        fmt_num(cy),
        fmt_num(ox + 16.0),
        fmt_num(cy),
        escape(&p.y_label)
    );

    for (i, s) in p.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut segment: Vec<String> = Vec::new();
        let flush = |seg: &mut Vec<String>, out: &mut String| {
            if seg.len() > 1 {
                let _ = writeln!(
                    out,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                    seg.join(" ")
                );
            }
            seg.clear();
        };
        for &(x, y) in &s.points {
            match y {
                Some(y) => {
                    segment.push(format!("{},{}", fmt_num(sx(x)), fmt_num(sy(y))));
                    let _ = writeln!(
                        out,
                        r#"<circle cx="{}" cy="{}" r="2.5" fill="{color}"/>"#,
                        fmt_num(sx(x)),
                        fmt_num(sy(y))
                    );
                }
                None => flush(&mut segment, out),
            }
        }
        flush(&mut segment, out);
        let ly = PANEL_H + LEGEND_ROW * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="2"/>"#,
            fmt_num(ox + MARGIN_L),
            fmt_num(ly),
            fmt_num(ox + MARGIN_L + 20.0),
            fmt_num(ly)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="11">{}</text>"#,
            fmt_num(ox + MARGIN_L + 26.0),
            fmt_num(ly + 4.0),
            escape(&s.name)
        );
    }
}

/// Render panels left to right into one SVG document.
pub fn render(panels: &[Panel]) -> String {
    let legend_rows = panels.iter().map(|p| p.series.len()).max().unwrap_or(0);
    let width = PANEL_W * panels.len().max(1) as f64;
    let height = PANEL_H + LEGEND_ROW * legend_rows as f64 + 10.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif">"#,
        fmt_num(width),
        fmt_num(height),
        fmt_num(width),
        fmt_num(height)
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        panel(&mut out, p, PANEL_W * i as f64);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Panel {
        Panel {
            title: "a < b & c".into(),
            x_label: "ε".into(),
            y_label: "value".into(),
            series: vec![
                Series {
                    name: "one".into(),
                    points: vec![(0.0, Some(0.1)), (1.0, None), (2.0, Some(0.3)), (3.0, Some(0.2))],
                },
                Series {
                    name: "two".into(),
                    points: vec![(0.0, Some(0.5)), (3.0, Some(0.5))],
                },
            ],
            y_range: None,
        }
    }

    #[test]
    fn gaps_break_lines() {
        let svg = render(&[sample()]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 5);
        assert!(svg.contains("a &lt; b &amp; c"));
    }

    #[test]
    fn parses_as_xml() {
        let svg = render(&[sample(), sample()]);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        let empty = render(&[Panel {
            series: vec![],
            ..sample()
        }]);
        roxmltree::Document::parse(&empty).unwrap();
    }
}
