//! Minimal static SVG charts: class-coloured scatter plots and line charts.

use std::fmt::Write as _;

const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

const W: f64 = 480.0;
const H: f64 = 400.0;
const MARGIN: f64 = 48.0;

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }

    fn axes(&self, s: &mut String, xlabel: &str, ylabel: &str) {
        let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
        let _ =
            writeln!(s, r##"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="#444"/>"##, r - l, b - t);
        for k in 0..=4 {
            let fx = self.x0 + (self.x1 - self.x0) * k as f64 / 4.0;
            let fy = self.y0 + (self.y1 - self.y0) * k as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                self.px(fx),
                b + 14.0,
                tick(fx)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                l - 4.0,
                self.py(fy) + 4.0,
                tick(fy)
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(xlabel));
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(ylabel)
        );
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

/// Scatter of 2-D points coloured by class, on a fixed `[-1.2, 1.2]²` frame
/// with the unit circle drawn for reference.
pub fn scatter(points: &[(f64, f64, usize)], title: &str) -> String {
    let frame = Frame { x0: -1.2, x1: 1.2, y0: -1.2, y1: 1.2 };
    let mut s = header(title);
    frame.axes(&mut s, "z0", "z1");
    let r = frame.px(1.0) - frame.px(0.0);
    let ry = frame.py(0.0) - frame.py(1.0);
    let _ = writeln!(
        s,
        r##"<ellipse cx="{:.2}" cy="{:.2}" rx="{r:.2}" ry="{ry:.2}" fill="none" stroke="#bbb" stroke-dasharray="4 3"/>"##,
        frame.px(0.0),
        frame.py(0.0)
    );
    for &(x, y, c) in points {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.2" fill="{}" fill-opacity="0.7"/>"#,
            frame.px(x.clamp(-1.2, 1.2)),
            frame.py(y.clamp(-1.2, 1.2)),
            PALETTE[c % PALETTE.len()]
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Named series of `(x, y)` points drawn as polylines with a legend.
pub fn line_chart(series: &[(String, Vec<(f64, f64)>)], title: &str, xlabel: &str, ylabel: &str) -> String {
    let finite = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    let frame = Frame { x0, x1, y0: y0 - pad, y1: y1 + pad };
    let mut s = header(title);
    frame.axes(&mut s, xlabel, ylabel);
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ =
            writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, coords.join(" "));
        let ly = MARGIN + 14.0 * (k as f64 + 1.0);
        let lx = W - MARGIN - 110.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 16.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 20.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}
