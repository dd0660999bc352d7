//! Minimal SVG writer: primitives, linear axes and marching-squares
//! contours.

use std::fmt::Write;

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[derive(Debug, Clone)]
pub struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        Self {
            width,
            height,
            body: String::new(),
        }
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}" stroke="none"/>"#
        );
    }

    pub fn line(&mut self, a: (f64, f64), b: (f64, f64), stroke: &str, width: f64) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{stroke}" stroke-width="{width}"/>"#,
            a.0, a.1, b.0, b.1
        );
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64, dashed: bool) {
        if pts.is_empty() {
            return;
        }
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let dash = if dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}"{dash}/>"#,
            p.join(" ")
        );
    }

    pub fn polygon(&mut self, pts: &[(f64, f64)], fill: &str, opacity: f64) {
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.body,
            r#"<polygon points="{}" fill="{fill}" fill-opacity="{opacity}" stroke="none"/>"#,
            p.join(" ")
        );
    }

    pub fn circle(&mut self, c: (f64, f64), r: f64, fill: &str) {
        let _ = writeln!(self.body, r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{fill}"/>"#, c.0, c.1);
    }

    pub fn text(&mut self, pos: (f64, f64), s: &str, size: f64, anchor: &str, rotate: bool) {
        let rot = if rotate {
            format!(r#" transform="rotate(-90 {:.2} {:.2})""#, pos.0, pos.1)
        } else {
            String::new()
        };
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="{size}" text-anchor="{anchor}"{rot}>{}</text>"#,
            pos.0,
            pos.1,
            escape(s)
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

/// Round tick positions covering `[lo, hi]`.
pub fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if !(hi > lo) || n == 0 {
        return vec![lo];
    }
    let raw = (hi - lo) / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() as i64;
    let end = (hi / step).floor() as i64;
    (start..=end).map(|k| k as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

/// Data-to-pixel mapping for one plot panel.
#[derive(Debug, Clone, Copy)]
pub struct Axes {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl Axes {
    pub fn new(x_range: (f64, f64), y_range: (f64, f64), left: f64, top: f64, width: f64, height: f64) -> Self {
        let widen = |(a, b): (f64, f64)| {
            if b > a {
                (a, b)
            } else {
                let d = if a == 0.0 { 1.0 } else { a.abs() * 0.05 };
                (a - d, b + d)
            }
        };
        Self {
            x_range: widen(x_range),
            y_range: widen(y_range),
            left,
            top,
            width,
            height,
        }
    }

    pub fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let fx = (x - self.x_range.0) / (self.x_range.1 - self.x_range.0);
        let fy = (y - self.y_range.0) / (self.y_range.1 - self.y_range.0);
        (self.left + fx * self.width, self.top + (1.0 - fy) * self.height)
    }

    pub fn draw(&self, svg: &mut Svg, x_label: &str, y_label: &str, title: &str) {
        let (l, t, w, h) = (self.left, self.top, self.width, self.height);
        svg.line((l, t + h), (l + w, t + h), "black", 1.0);
        svg.line((l, t), (l, t + h), "black", 1.0);
        for x in nice_ticks(self.x_range.0, self.x_range.1, 6) {
            let (px, _) = self.px(x, self.y_range.0);
            svg.line((px, t + h), (px, t + h + 4.0), "black", 1.0);
            svg.text((px, t + h + 16.0), &fmt_tick(x), 10.0, "middle", false);
        }
        for y in nice_ticks(self.y_range.0, self.y_range.1, 5) {
            let (_, py) = self.px(self.x_range.0, y);
            svg.line((l - 4.0, py), (l, py), "black", 1.0);
            svg.text((l - 6.0, py + 3.0), &fmt_tick(y), 10.0, "end", false);
        }
        svg.text((l + w / 2.0, t + h + 34.0), x_label, 12.0, "middle", false);
        svg.text((l - 44.0, t + h / 2.0), y_label, 12.0, "middle", true);
        svg.text((l + w / 2.0, t - 10.0), title, 13.0, "middle", false);
    }
}

/// Colour on a dark-blue to yellow ramp for `t` in [0, 1].
pub fn ramp(t: f64) -> String {
    const STOPS: [(f64, f64, f64); 5] = [
        (68.0, 1.0, 84.0),
        (59.0, 82.0, 139.0),
        (33.0, 145.0, 140.0),
        (94.0, 201.0, 98.0),
        (253.0, 231.0, 37.0),
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let f = t * (STOPS.len() - 1) as f64;
    let i = (f.floor() as usize).min(STOPS.len() - 2);
    let u = f - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let c = |x: f64, y: f64| (x + (y - x) * u).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(a.0, b.0), c(a.1, b.1), c(a.2, b.2))
}

pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub type Segment = ((f64, f64), (f64, f64));

/// Iso-line segments of `values[iy][ix]` sampled at `(xs[ix], ys[iy])`.
pub fn marching_squares(values: &[Vec<f64>], xs: &[f64], ys: &[f64], level: f64) -> Vec<Segment> {
    let mut segs = Vec::new();
    if ys.len() < 2 || xs.len() < 2 {
        return segs;
    }
    let lerp = |a: (f64, f64, f64), b: (f64, f64, f64)| {
        let t = if b.2 == a.2 { 0.5 } else { (level - a.2) / (b.2 - a.2) };
        (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
    };
    for iy in 0..ys.len() - 1 {
        for ix in 0..xs.len() - 1 {
            // Corners counter-clockwise from bottom-left.
            let c = [
                (xs[ix], ys[iy], values[iy][ix]),
                (xs[ix + 1], ys[iy], values[iy][ix + 1]),
                (xs[ix + 1], ys[iy + 1], values[iy + 1][ix + 1]),
                (xs[ix], ys[iy + 1], values[iy + 1][ix]),
            ];
            if c.iter().any(|v| !v.2.is_finite()) {
                continue;
            }
            let case = c
                .iter()
                .enumerate()
                .fold(0u8, |acc, (k, v)| acc | (((v.2 >= level) as u8) << k));
            // Edge k joins corner k and k+1.
            let e = |k: usize| lerp(c[k], c[(k + 1) % 4]);
            let centre = c.iter().map(|v| v.2).sum::<f64>() / 4.0;
            let pairs: &[(usize, usize)] = match case {
                0 | 15 => &[],
                1 | 14 => &[(3, 0)],
                2 | 13 => &[(0, 1)],
                3 | 12 => &[(3, 1)],
                4 | 11 => &[(1, 2)],
                6 | 9 => &[(0, 2)],
                7 | 8 => &[(2, 3)],
                5 => {
                    if centre >= level {
                        &[(3, 2), (0, 1)]
                    } else {
                        &[(3, 0), (1, 2)]
                    }
                }
                10 => {
                    if centre >= level {
                        &[(3, 0), (1, 2)]
                    } else {
                        &[(0, 1), (2, 3)]
                    }
                }
                _ => unreachable!(),
            };
            for &(a, b) in pairs {
                segs.push((e(a), e(b)));
            }
        }
    }
    segs
}
