//! Minimal SVG scatter plots. CSV files are the data contract; these are for eyeballing.

const W: f64 = 480.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub group: usize,
    pub label: Option<String>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(vals: impl Iterator<Item = f64>, include_zero: bool) -> (f64, f64) {
    let (mut lo, mut hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if include_zero {
        lo = lo.min(0.0);
        hi = hi.max(0.0);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (-1.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Scatter plot; with `zero_axes` the axes cross at the origin (quadrant layout).
pub fn scatter(points: &[ScatterPoint], title: &str, x_label: &str, y_label: &str, zero_axes: bool, legend: &[String]) -> String {
    let (x0, x1) = range(points.iter().map(|p| p.x), zero_axes);
    let (y0, y1) = range(points.iter().map(|p| p.y), zero_axes);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        esc(title)
    );
    let (ax, ay) = if zero_axes { (sx(0.0), sy(0.0)) } else { (MARGIN, H - MARGIN) };
    s += &format!("<line x1=\"{MARGIN}\" y1=\"{ay:.2}\" x2=\"{}\" y2=\"{ay:.2}\" stroke=\"black\"/>\n", W - MARGIN);
    s += &format!("<line x1=\"{ax:.2}\" y1=\"{MARGIN}\" x2=\"{ax:.2}\" y2=\"{}\" stroke=\"black\"/>\n", H - MARGIN);
    s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n", W / 2.0, H - 12.0, esc(x_label));
    s += &format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {})\">{}</text>\n",
        H / 2.0,
        H / 2.0,
        esc(y_label)
    );
    for (lo, hi, horizontal) in [(x0, x1, true), (y0, y1, false)] {
        for (v, anchor) in [(lo, "start"), (hi, "end")] {
            if horizontal {
                s += &format!(
                    "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"{anchor}\" font-size=\"10\">{v:.3}</text>\n",
                    sx(v),
                    H - MARGIN + 14.0
                );
            } else {
                s += &format!("<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"10\">{v:.3}</text>\n", MARGIN - 4.0, sy(v));
            }
        }
    }
    for p in points {
        let color = PALETTE[p.group % PALETTE.len()];
        s += &format!("<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\" fill-opacity=\"0.8\"/>\n", sx(p.x), sy(p.y));
        if let Some(l) = &p.label {
            s += &format!("<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">{}</text>\n", sx(p.x) + 6.0, sy(p.y) - 6.0, esc(l));
        }
    }
    for (i, name) in legend.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        s += &format!("<circle cx=\"{}\" cy=\"{y}\" r=\"4\" fill=\"{color}\"/>\n", W - MARGIN - 60.0);
        s += &format!("<text x=\"{}\" y=\"{}\" font-size=\"10\">{}</text>\n", W - MARGIN - 50.0, y + 3.0, esc(name));
    }
    s += "</svg>\n";
    s
}
