//! Static SVG line plots and heatmaps.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self { name: name.into(), points }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Dashed horizontal reference lines.
    pub hlines: Vec<(String, f64)>,
    pub log_y: bool,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{:.3}", v).trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * (1.0 + lo.abs()) {
        let pad = if lo == 0.0 { 1.0 } else { 0.1 * lo.abs() };
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

impl LinePlot {
    pub fn to_svg(&self) -> String {
        let ty = |y: f64| if self.log_y { y.max(1e-300).log10() } else { y };
        let (x0, x1) = range(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
        let (y0, y1) = range(self.series.iter().flat_map(|s| s.points.iter().map(|p| ty(p.1))).chain(self.hlines.iter().map(|h| ty(h.1))));
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (ty(y) - y0) / (y1 - y0)) * ph;
        let mut s = String::new();
        let _ = write!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>
<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>
"#,
            LEFT + pw / 2.0,
            esc(&self.title)
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = x0 + f * (x1 - x0);
            let yv = y0 + f * (y1 - y0);
            let ylab = if self.log_y { tick(10f64.powf(yv)) } else { tick(yv) };
            let (px, py) = (LEFT + f * pw, TOP + (1.0 - f) * ph);
            let _ = writeln!(s, r##"<line x1="{px:.1}" y1="{}" x2="{px:.1}" y2="{}" stroke="#ddd"/><text x="{px:.1}" y="{}" text-anchor="middle">{}</text>"##, TOP, TOP + ph, TOP + ph + 16.0, tick(xv));
            let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{py:.1}" x2="{}" y2="{py:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{ylab}</text>"##, LEFT + pw, LEFT - 6.0, py + 4.0);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 12.0, esc(&self.x_label));
        let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#, TOP + ph / 2.0, TOP + ph / 2.0, esc(&self.y_label));
        for (label, y) in &self.hlines {
            let py = sy(*y);
            let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{py:.1}" x2="{}" y2="{py:.1}" stroke="#555" stroke-dasharray="5,4"/><text x="{}" y="{:.1}">{}</text>"##, LEFT + pw, LEFT + pw + 6.0, py + 4.0, esc(label));
        }
        for (i, ser) in self.series.iter().enumerate() {
            let c = COLORS[i % COLORS.len()];
            let pts: Vec<String> = ser.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
            if ser.points.len() <= 30 {
                for p in &pts {
                    let (x, y) = p.split_once(',').unwrap_or(("0", "0"));
                    let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{c}"/>"#);
                }
            }
            let ly = TOP + 14.0 + 18.0 * i as f64;
            let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#, LEFT + pw + 10.0, LEFT + pw + 28.0, LEFT + pw + 32.0, ly + 4.0, esc(&ser.name));
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Row-major `side × side` grid, row 0 at the bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub title: String,
    pub side: usize,
    pub values: Vec<f64>,
}

fn color(t: f64) -> String {
    // Blue through white to red.
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let u = t / 0.5;
        (u, u, 1.0)
    } else {
        let u = (t - 0.5) / 0.5;
        (1.0, 1.0 - u, 1.0 - u)
    };
    format!("#{:02x}{:02x}{:02x}", (r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8)
}

impl Heatmap {
    pub fn to_svg(&self) -> String {
        let n = self.side.max(1);
        let size = 400.0;
        let cell = size / n as f64;
        let (lo, hi) = range(self.values.iter().copied());
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12"><rect width="100%" height="100%" fill="white"/><text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            size + 120.0,
            size + 60.0,
            20.0 + size / 2.0,
            esc(&self.title)
        );
        for (i, v) in self.values.iter().enumerate() {
            let (row, col) = (i / n, i % n);
            let x = 20.0 + col as f64 * cell;
            let y = 40.0 + (n - 1 - row) as f64 * cell;
            let _ = writeln!(s, r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#, cell + 0.3, cell + 0.3, color((v - lo) / (hi - lo)));
        }
        for i in 0..=10 {
            let f = i as f64 / 10.0;
            let y = 40.0 + (1.0 - f) * (size - size / 11.0);
            let _ = writeln!(s, r#"<rect x="{}" y="{y:.1}" width="20" height="{:.1}" fill="{}"/>"#, size + 40.0, size / 11.0, color(f));
        }
        let _ = writeln!(s, r#"<text x="{}" y="50">{}</text><text x="{}" y="{}">{}</text>"#, size + 64.0, tick(hi), size + 64.0, 40.0 + size, tick(lo));
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_plot_contains_series_and_escapes() {
        let p = LinePlot {
            title: "a < b".into(),
            x_label: "t".into(),
            y_label: "y".into(),
            series: vec![Series::new("s1", vec![(0.0, 1.0), (1.0, 2.0)]), Series::new("flat", vec![(0.0, 3.0), (1.0, 3.0)])],
            hlines: vec![("bound".into(), 2.5)],
            log_y: false,
        };
        let svg = p.to_svg();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a &lt; b"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn heatmap_has_one_cell_per_value() {
        let h = Heatmap { title: "θ".into(), side: 3, values: (0..9).map(f64::from).collect() };
        let svg = h.to_svg();
        assert_eq!(svg.matches("<rect").count(), 1 + 9 + 11);
        let flat = Heatmap { title: String::new(), side: 2, values: vec![1.0; 4] }.to_svg();
        assert!(!flat.contains("NaN"));
    }
}
