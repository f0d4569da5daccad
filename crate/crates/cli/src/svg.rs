//! Minimal SVG line and band charts. The CSV files are the real outputs;
//! these are for a quick look.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 40.0, 55.0); // left, right, top, bottom
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Median line with a shaded `[lo, hi]` band at each `x`.
pub struct Band {
    pub label: String,
    /// `(x, median, lo, hi)`.
    pub rows: Vec<(f64, f64, f64, f64)>,
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let range = |v: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = v
                .filter(|x| x.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        Self {
            x: range(&mut xs.clone()),
            y: range(&mut ys.clone()),
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN.0 + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - MARGIN.0 - MARGIN.1)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN.3 - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - MARGIN.2 - MARGIN.3)
    }

    fn axes(&self, out: &mut String, title: &str, x_label: &str, y_label: &str) {
        let (x0, x1) = (MARGIN.0, WIDTH - MARGIN.1);
        let (y0, y1) = (HEIGHT - MARGIN.3, MARGIN.2);
        let _ = writeln!(
            out,
            r##"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>
<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>
<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>
<text x="18" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {})">{}</text>"##,
            WIDTH / 2.0,
            escape(title),
            (x0 + x1) / 2.0,
            HEIGHT - 12.0,
            escape(x_label),
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label),
        );
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let xv = self.x.0 + t * (self.x.1 - self.x.0);
            let yv = self.y.0 + t * (self.y.1 - self.y.0);
            let _ = writeln!(
                out,
                r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>
<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{}</text>
<line x1="{x0}" y1="{:.1}" x2="{x1}" y2="{:.1}" stroke="#ddd"/>"##,
                self.px(xv),
                y0 + 16.0,
                tick(xv),
                x0 - 6.0,
                self.py(yv) + 4.0,
                tick(yv),
                self.py(yv),
                self.py(yv),
            );
        }
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(frame: &Frame, pts: impl Iterator<Item = (f64, f64)>) -> String {
    pts.filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn legend(out: &mut String, labels: &[&str]) {
    for (i, label) in labels.iter().enumerate() {
        let y = MARGIN.2 + 14.0 + 18.0 * i as f64;
        let x = WIDTH - MARGIN.1 - 150.0;
        let _ = writeln!(
            out,
            r##"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2"/>
<text x="{}" y="{}" font-size="12">{}</text>"##,
            x + 20.0,
            PALETTE[i % PALETTE.len()],
            x + 26.0,
            y + 4.0,
            escape(label)
        );
    }
}

fn document(body: String) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" font-family=\"sans-serif\">\n{body}</svg>\n"
    )
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let frame = Frame::new(xs, ys);
    let mut out = String::new();
    frame.axes(&mut out, title, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            polyline(&frame, s.points.iter().copied())
        );
    }
    legend(&mut out, &series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>());
    document(out)
}

pub fn band_chart(title: &str, x_label: &str, y_label: &str, bands: &[Band]) -> String {
    let xs = bands.iter().flat_map(|b| b.rows.iter().map(|r| r.0));
    let ys = bands.iter().flat_map(|b| b.rows.iter().flat_map(|r| [r.2, r.3]));
    let frame = Frame::new(xs, ys);
    let mut out = String::new();
    frame.axes(&mut out, title, x_label, y_label);
    for (i, b) in bands.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper = b.rows.iter().map(|r| (r.0, r.3));
        let lower = b.rows.iter().rev().map(|r| (r.0, r.2));
        let _ = writeln!(
            out,
            r#"<polygon fill="{color}" fill-opacity="0.2" stroke="none" points="{}"/>
<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            polyline(&frame, upper.chain(lower)),
            polyline(&frame, b.rows.iter().map(|r| (r.0, r.1)))
        );
    }
    legend(&mut out, &bands.iter().map(|b| b.label.as_str()).collect::<Vec<_>>());
    document(out)
}
