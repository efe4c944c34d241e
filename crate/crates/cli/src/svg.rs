//! Minimal SVG renderings of a confidence curve and heatmap.

use std::fmt::Write;

use porous_gp::confidence::{ConfidenceHeatmap, ConfidenceResult};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 55.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = if self.x1 > self.x0 { self.x1 - self.x0 } else { 1.0 };
        LEFT + (x - self.x0) / span * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let span = if self.y1 > self.y0 { self.y1 - self.y0 } else { 1.0 };
        HEIGHT - BOTTOM - (y - self.y0) / span * (HEIGHT - TOP - BOTTOM)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (l, r, t, b) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let _ = writeln!(
        out,
        r#"<path d="M{l},{t} L{l},{b} L{r},{b}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let fx = f.x0 + (f.x1 - f.x0) * k as f64 / 4.0;
        let x = f.px(fx);
        let _ = writeln!(
            out,
            r#"<line x1="{x}" y1="{b}" x2="{x}" y2="{}" stroke="black"/><text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
            b + 5.0,
            b + 18.0,
            tick(fx)
        );
        let fy = f.y0 + (f.y1 - f.y0) * k as f64 / 4.0;
        let y = f.py(fy);
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{y}" x2="{l}" y2="{y}" stroke="black"/><text x="{}" y="{}" text-anchor="end">{}</text>"#,
            l - 5.0,
            l - 8.0,
            y + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (l + r) / 2.0,
        HEIGHT - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (t + b) / 2.0,
        (t + b) / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 0.01 && v.abs() < 1e4 {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Confidence against extraction rate at one threshold, with ±2 standard
/// error whiskers when available.
pub fn curve_svg(curve: &[ConfidenceResult], threshold: f64) -> String {
    let mut out = String::new();
    header(&mut out, &format!("Expected confidence, threshold h = {}", tick(threshold)));
    let f = Frame {
        x0: curve.iter().map(|c| c.r).fold(f64::INFINITY, f64::min).min(0.0),
        x1: curve.iter().map(|c| c.r).fold(0.0, f64::max),
        y0: 0.0,
        y1: 1.0,
    };
    axes(&mut out, &f, "extraction rate r (m³/s)", "confidence");
    for c in curve {
        if let Some(se) = c.stderr {
            let x = f.px(c.r);
            let _ = writeln!(
                out,
                r##"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="#999"/>"##,
                f.py((c.estimate - 2.0 * se).max(0.0)),
                f.py((c.estimate + 2.0 * se).min(1.0))
            );
        }
    }
    let pts: Vec<String> = curve
        .iter()
        .map(|c| format!("{:.2},{:.2}", f.px(c.r), f.py(c.estimate)))
        .collect();
    let _ = writeln!(
        out,
        r##"<polyline points="{}" fill="none" stroke="#1f6fb4" stroke-width="2"/>"##,
        pts.join(" ")
    );
    out.push_str("</svg>\n");
    out
}

/// Blue-to-yellow colour for a value in `[0, 1]`.
fn colour(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(40.0, 250.0), lerp(30.0, 230.0), lerp(120.0, 40.0))
}

/// Confidence over extraction rate (x) and threshold (y).
pub fn heatmap_svg(map: &ConfidenceHeatmap) -> String {
    let mut out = String::new();
    header(&mut out, "Expected confidence by rate and threshold");
    let edges = |v: &[f64]| -> Vec<f64> {
        match v.len() {
            0 => Vec::new(),
            1 => vec![v[0] - 0.5, v[0] + 0.5],
            k => {
                let mut e = Vec::with_capacity(k + 1);
                e.push(v[0] - 0.5 * (v[1] - v[0]));
                e.extend(v.windows(2).map(|w| 0.5 * (w[0] + w[1])));
                e.push(v[k - 1] + 0.5 * (v[k - 1] - v[k - 2]));
                e
            }
        }
    };
    let (xe, ye) = (edges(&map.rates), edges(&map.thresholds));
    if xe.is_empty() || ye.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let f = Frame {
        x0: xe[0],
        x1: xe[xe.len() - 1],
        y0: ye[0],
        y1: ye[ye.len() - 1],
    };
    for (i, row) in map.estimates.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let (x, w) = (f.px(xe[i]), f.px(xe[i + 1]) - f.px(xe[i]));
            let (y, h) = (f.py(ye[j + 1]), f.py(ye[j]) - f.py(ye[j + 1]));
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                w + 0.5,
                h + 0.5,
                colour(*v)
            );
        }
    }
    axes(&mut out, &f, "extraction rate r (m³/s)", "threshold h");
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_has_one_vertex_per_point() {
        let curve: Vec<ConfidenceResult> = (0..5)
            .map(|i| ConfidenceResult {
                r: i as f64 * 0.01,
                threshold: 1.0,
                estimate: i as f64 / 4.0,
                nodes: 16,
                stderr: Some(0.01),
            })
            .collect();
        let svg = curve_svg(&curve, 1.0);
        assert!(svg.starts_with("<svg"));
        let poly = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        assert_eq!(poly.matches(',').count(), 5);
    }

    #[test]
    fn heatmap_has_one_cell_per_entry() {
        let map = ConfidenceHeatmap {
            rates: vec![0.0, 0.5, 1.0],
            thresholds: vec![1.0, 2.0],
            estimates: vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]],
            stderr: vec![vec![None; 2]; 3],
        };
        let svg = heatmap_svg(&map);
        assert_eq!(svg.matches("<rect x=").count(), 6);
        assert_eq!(colour(0.0), "#281e78");
    }
}
