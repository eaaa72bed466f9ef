//! Minimal SVG renderings of the tabular outputs. The CSVs are the real
//! artifacts; these are for a quick look.

use std::fmt::Write as _;
use std::path::Path;

use geogan::{Error, Result};

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Frame {
        Frame { x: span(xs), y: span(ys) }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * PAD)
    }
}

fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(title: &str, xlabel: &str, ylabel: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    for (v, at) in [(f.x.0, PAD), (f.x.1, W - PAD)] {
        let _ = writeln!(s, r#"<text x="{at}" y="{}" text-anchor="middle">{v:.3}</text>"#, H - PAD + 14.0);
    }
    for (v, at) in [(f.y.0, H - PAD), (f.y.1, PAD)] {
        let _ = writeln!(s, r#"<text x="{}" y="{at}" text-anchor="end">{v:.3}</text>"#, PAD - 4.0);
    }
    s
}

fn save(path: &Path, mut svg: String) -> Result<()> {
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Scatter with the identity line.
pub fn scatter(path: &Path, title: &str, xlabel: &str, ylabel: &str, pts: &[(f64, f64)]) -> Result<()> {
    let all = pts.iter().flat_map(|&(x, y)| [x, y]);
    let f = Frame::new(all.clone(), all);
    let mut s = open(title, xlabel, ylabel, &f);
    let (lo, hi) = (f.x.0.max(f.y.0), f.x.1.min(f.y.1));
    let _ = writeln!(
        s,
        r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#999" stroke-dasharray="4 3"/>"##,
        f.px(lo),
        f.py(lo),
        f.px(hi),
        f.py(hi)
    );
    for &(x, y) in pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
        let _ = writeln!(s, r##"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="#1f6fb4" fill-opacity="0.7"/>"##, f.px(x), f.py(y));
    }
    save(path, s)
}

/// One box per row: whiskers at min/max, box Q1..Q3, bar at the median.
pub fn boxes(path: &Path, title: &str, xlabel: &str, ylabel: &str, rows: &[(f64, [f64; 5])]) -> Result<()> {
    let f = Frame::new(rows.iter().map(|r| r.0), rows.iter().flat_map(|r| r.1));
    let mut s = open(title, xlabel, ylabel, &f);
    let half = if rows.len() > 1 { 0.3 * (f.px(rows[1].0) - f.px(rows[0].0)).abs() } else { 10.0 };
    for (x, q) in rows {
        let cx = f.px(*x);
        let _ = writeln!(s, r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#, f.py(q[0]), f.py(q[4]));
        let _ = writeln!(
            s,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#cfe2f3" stroke="black"/>"##,
            cx - half,
            f.py(q[3]),
            2.0 * half,
            (f.py(q[1]) - f.py(q[3])).max(0.5)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#c0392b" stroke-width="2"/>"##,
            cx - half,
            f.py(q[2]),
            cx + half,
            f.py(q[2])
        );
    }
    save(path, s)
}

/// Histogram of `values` over `[lo, hi]` in `bins` equal bins.
pub fn histogram(path: &Path, title: &str, xlabel: &str, values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<()> {
    let mut counts = vec![0usize; bins];
    for &v in values.iter().filter(|v| v.is_finite()) {
        let b = (((v - lo) / (hi - lo)) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize;
        counts[b] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0) as f64;
    let f = Frame { x: (lo, hi), y: (0.0, max.max(1.0)) };
    let mut s = open(title, xlabel, "cities", &f);
    let bw = (hi - lo) / bins as f64;
    for (b, &c) in counts.iter().enumerate() {
        let x0 = f.px(lo + b as f64 * bw);
        let x1 = f.px(lo + (b + 1) as f64 * bw);
        let _ = writeln!(
            s,
            r##"<rect x="{x0:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#7fb77e" stroke="white"/>"##,
            f.py(c as f64),
            x1 - x0,
            f.py(0.0) - f.py(c as f64)
        );
    }
    save(path, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_well_formed_documents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.svg");
        scatter(&p, "a <vs> b", "x", "y", &[(0.0, 0.1), (1.0, 0.9), (f64::NAN, 1.0)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
        assert_eq!(text.matches("<circle").count(), 2);
        assert!(text.contains("a &lt;vs&gt; b"));

        boxes(&p, "t", "x", "y", &[(3.5, [-3.0, -2.0, -1.5, -1.0, 0.0]), (10.5, [-4.0, -3.0, -2.5, -2.0, -1.0])]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().matches("<rect").count(), 4);

        histogram(&p, "t", "x", &[0.0, 0.05, 0.5, 1.0], 0.0, 1.0, 10).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.matches(r##"fill="#7fb77e""##).count(), 10);
    }

    #[test]
    fn degenerate_ranges_do_not_divide_by_zero() {
        let f = Frame::new([2.0, 2.0].into_iter(), std::iter::empty());
        assert!(f.px(2.0).is_finite() && f.py(0.5).is_finite());
    }
}
