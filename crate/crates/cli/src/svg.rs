//! Bare-bones SVG charts: enough for accuracy curves and embedding scatters.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Self {
        let (mut x, mut y) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
        for &(a, b) in points {
            x = (x.0.min(a), x.1.max(a));
            y = (y.0.min(b), y.1.max(b));
        }
        let widen = |(lo, hi): (f64, f64)| {
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Frame { x: widen(x), y: widen(y) }
    }

    fn px(&self, (a, b): (f64, f64)) -> (f64, f64) {
        let u = PAD + (a - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * PAD);
        let v = H - PAD - (b - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * PAD);
        (u, v)
    }
}

fn open(title: &str, xlabel: &str, ylabel: &str, frame: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    for (v, anchor_x, anchor_y) in [(frame.x.0, PAD, H - PAD + 14.0), (frame.x.1, W - PAD, H - PAD + 14.0)] {
        let _ = writeln!(s, r#"<text x="{anchor_x}" y="{anchor_y}" text-anchor="middle">{v:.3}</text>"#);
    }
    for (v, y) in [(frame.y.0, H - PAD), (frame.y.1, PAD)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, PAD - 4.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    s
}

/// One polyline per named series.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let frame = Frame::fit(series.iter().flat_map(|(_, p)| p.iter()));
    let mut s = open(title, xlabel, ylabel, &frame);
    for (i, (name, pts)) in series.iter().enumerate() {
        let d: Vec<String> = pts
            .iter()
            .map(|&p| {
                let (u, v) = frame.px(p);
                format!("{u:.2},{v:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            d.join(" "),
            color(i)
        );
        for &p in pts {
            let (u, v) = frame.px(p);
            let _ = writeln!(s, r#"<circle cx="{u:.2}" cy="{v:.2}" r="2" fill="{}"/>"#, color(i));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{}">{}</text>"#,
            W - PAD + 4.0,
            PAD + 14.0 * i as f64,
            color(i),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Points coloured by cluster label.
pub fn scatter(title: &str, points: &[[f64; 2]], labels: &[usize]) -> String {
    let pts: Vec<(f64, f64)> = points.iter().map(|p| (p[0], p[1])).collect();
    let frame = Frame::fit(pts.iter());
    let mut s = open(title, "t-SNE 1", "t-SNE 2", &frame);
    for (i, &p) in pts.iter().enumerate() {
        let (u, v) = frame.px(p);
        let c = color(labels.get(i).copied().unwrap_or(0));
        let _ = writeln!(s, r#"<circle cx="{u:.2}" cy="{v:.2}" r="3" fill="{c}" fill-opacity="0.8"/>"#);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_formed() {
        let svg = line_chart("a<b", "x", "y", &[("s".into(), vec![(0.0, 0.5), (1.0, 0.7)])]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
        assert_eq!(svg.matches("<circle").count(), 2);
        let sc = scatter("t", &[[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]], &[0, 1, 1]);
        assert_eq!(sc.matches(color(1)).count(), 2);
    }

    #[test]
    fn degenerate_ranges() {
        // single point and empty series must not produce NaN coordinates
        let svg = line_chart("", "", "", &[("one".into(), vec![(3.0, 3.0)]), ("none".into(), vec![])]);
        assert!(!svg.contains("NaN"));
        assert!(!scatter("", &[], &[]).contains("NaN"));
    }
}
