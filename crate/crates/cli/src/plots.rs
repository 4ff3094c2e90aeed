//! Minimal SVG line, scatter and heatmap plots.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 70.0;
const MR: f64 = 20.0;
const MT: f64 = 30.0;
const MB: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Linear,
    Log,
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Symmetric y error bars.
    pub errors: Option<Vec<f64>>,
    pub markers: bool,
    pub line: bool,
}

impl Series {
    pub fn line(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            label: label.into(),
            points,
            errors: None,
            markers: false,
            line: true,
        }
    }

    pub fn markers(label: impl Into<String>, points: Vec<(f64, f64)>, errors: Option<Vec<f64>>) -> Self {
        Series {
            label: label.into(),
            points,
            errors,
            markers: true,
            line: false,
        }
    }
}

pub struct Axes {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_scale: Scale,
    pub y_scale: Scale,
}

fn tr(v: f64, s: Scale) -> f64 {
    match s {
        Scale::Linear => v,
        Scale::Log => v.log10(),
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn ticks(lo: f64, hi: f64, scale: Scale) -> Vec<f64> {
    if scale == Scale::Log {
        return ((lo.ceil() as i64)..=(hi.floor() as i64)).map(|e| e as f64).collect();
    }
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(mag * 10.0);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn tick_label(v: f64, scale: Scale) -> String {
    match scale {
        Scale::Log => format!("1e{}", v as i64),
        Scale::Linear => {
            let s = format!("{v:.3}");
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(svg: &mut String, axes: &Axes, xr: (f64, f64), yr: (f64, f64)) {
    let pw = W - ML - MR;
    let ph = H - MT - MB;
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(&axes.title)
    );
    let _ = writeln!(svg, r#"<rect x="{ML}" y="{MT}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for t in ticks(xr.0, xr.1, axes.x_scale) {
        let x = ML + (t - xr.0) / (xr.1 - xr.0) * pw;
        let _ = writeln!(svg, r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/>"#, H - MB, H - MB + 5.0);
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
            H - MB + 18.0,
            tick_label(t, axes.x_scale)
        );
    }
    for t in ticks(yr.0, yr.1, axes.y_scale) {
        let y = MT + (yr.1 - t) / (yr.1 - yr.0) * ph;
        let _ = writeln!(svg, r#"<line x1="{}" y1="{y:.2}" x2="{ML}" y2="{y:.2}" stroke="black"/>"#, ML - 5.0);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            ML - 8.0,
            y + 4.0,
            tick_label(t, axes.y_scale)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        ML + pw / 2.0,
        H - 10.0,
        escape(&axes.x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        MT + ph / 2.0,
        MT + ph / 2.0,
        escape(&axes.y_label)
    );
}

pub fn xy_plot(axes: &Axes, series: &[Series]) -> String {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| tr(p.0, axes.x_scale)));
    let xr = range(xs);
    let ys = series.iter().flat_map(|s| {
        s.points.iter().enumerate().flat_map(move |(k, p)| {
            let e = s.errors.as_ref().map_or(0.0, |e| e[k]);
            [tr(p.1 - e, axes.y_scale), tr(p.1 + e, axes.y_scale)]
        })
    });
    let yr = range(ys);
    let pw = W - ML - MR;
    let ph = H - MT - MB;
    let px = |x: f64| ML + (tr(x, axes.x_scale) - xr.0) / (xr.1 - xr.0) * pw;
    let py = |y: f64| MT + (yr.1 - tr(y, axes.y_scale)) / (yr.1 - yr.0) * ph;
    let mut svg = String::new();
    frame(&mut svg, axes, xr, yr);
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if s.line && s.points.len() > 1 {
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|p| tr(p.1, axes.y_scale).is_finite())
                .map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1)))
                .collect();
            let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        }
        if s.markers {
            for (i, p) in s.points.iter().enumerate() {
                if !tr(p.1, axes.y_scale).is_finite() {
                    continue;
                }
                if let Some(e) = &s.errors {
                    let (lo, hi) = (py(p.1 - e[i]), py(p.1 + e[i]));
                    if lo.is_finite() && hi.is_finite() {
                        let _ = writeln!(
                            svg,
                            r#"<line x1="{x:.2}" y1="{lo:.2}" x2="{x:.2}" y2="{hi:.2}" stroke="{color}"/>"#,
                            x = px(p.0)
                        );
                    }
                }
                let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(p.0), py(p.1));
            }
        }
        let ly = MT + 14.0 + 16.0 * k as f64;
        let _ = writeln!(svg, r#"<rect x="{}" y="{}" width="12" height="3" fill="{color}"/>"#, W - MR - 150.0, ly - 4.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{ly}">{}</text>"#, W - MR - 132.0, escape(&s.label));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Heatmap of `z[row][col]` with rows along y and columns along x.
pub fn heatmap(axes: &Axes, x: &[f64], y: &[f64], z: &[Vec<f64>]) -> String {
    let xr = (x.first().copied().unwrap_or(0.0), x.last().copied().unwrap_or(1.0));
    let yr = (y.first().copied().unwrap_or(0.0), y.last().copied().unwrap_or(1.0));
    let xr = if xr.1 > xr.0 { xr } else { (xr.0 - 0.5, xr.0 + 0.5) };
    let yr = if yr.1 > yr.0 { yr } else { (yr.0 - 0.5, yr.0 + 0.5) };
    let zmax = z.iter().flatten().cloned().fold(0.0f64, f64::max).max(1e-300);
    let pw = W - ML - MR;
    let ph = H - MT - MB;
    let mut svg = String::new();
    frame(&mut svg, axes, xr, yr);
    let cw = pw / x.len().max(1) as f64;
    let ch = ph / y.len().max(1) as f64;
    for (r, row) in z.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let t = (v / zmax).clamp(0.0, 1.0);
            if t < 1e-3 {
                continue;
            }
            // white to dark blue
            let (rr, gg, bb) = ((255.0 * (1.0 - t)) as u8, (255.0 * (1.0 - 0.8 * t)) as u8, (255.0 - 100.0 * t) as u8);
            let xpos = ML + c as f64 * cw;
            let ypos = MT + ph - (r as f64 + 1.0) * ch;
            let _ = writeln!(
                svg,
                r##"<rect x="{xpos:.2}" y="{ypos:.2}" width="{:.2}" height="{:.2}" fill="#{rr:02x}{gg:02x}{bb:02x}"/>"##,
                cw + 0.3,
                ch + 0.3
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
