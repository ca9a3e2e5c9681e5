//! Sensitivity maps over (δ_mis, Δ_m) and their CSV / SVG rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Estimated sensitivity parameters with optional confidence intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub delta: f64,
    pub shift: f64,
    pub delta_ci: Option<(f64, f64)>,
    pub shift_ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityGrid {
    pub covariate: String,
    pub delta_axis: Vec<f64>,
    pub shift_axis: Vec<f64>,
    /// `bias[i][k]` at (`delta_axis[i]`, `shift_axis[k]`).
    pub bias: Vec<Vec<f64>>,
    /// Contours are drawn where |bias| = threshold.
    pub threshold: f64,
    /// Constant c in bias = −δ (Δ − c).
    pub correction: f64,
    pub marker: Option<Marker>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Inclusive lattice `lo, …, hi` with `steps` points.
pub fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..steps)
            .map(|i| {
                if i == steps - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    }
}

impl SensitivityGrid {
    /// Grid of −δ (Δ − c).
    pub fn bilinear(covariate: &str, delta_axis: Vec<f64>, shift_axis: Vec<f64>, correction: f64, threshold: f64) -> Self {
        let bias = delta_axis
            .iter()
            .map(|&d| shift_axis.iter().map(|&s| -d * (s - correction)).collect())
            .collect();
        let mut metadata = BTreeMap::new();
        metadata.insert(
            "sign_convention".into(),
            serde_json::Value::from(super::bias::SIGN_CONVENTION),
        );
        SensitivityGrid {
            covariate: covariate.into(),
            delta_axis,
            shift_axis,
            bias,
            threshold,
            correction,
            marker: None,
            metadata,
        }
    }

    pub fn rows(&self) -> usize {
        self.delta_axis.len() * self.shift_axis.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridFormat {
    Csv,
    Svg,
}

pub fn render_grid(grid: &SensitivityGrid, format: GridFormat) -> Result<Vec<u8>> {
    if grid.delta_axis.is_empty() || grid.shift_axis.is_empty() {
        return Err(Error::InvalidInput("empty sensitivity grid".into()));
    }
    Ok(match format {
        GridFormat::Csv => render_csv(grid).into_bytes(),
        GridFormat::Svg => render_svg(grid).into_bytes(),
    })
}

fn render_csv(grid: &SensitivityGrid) -> String {
    let mut out = String::from("delta_mis,shift,bias\n");
    for (i, d) in grid.delta_axis.iter().enumerate() {
        for (k, s) in grid.shift_axis.iter().enumerate() {
            let _ = writeln!(out, "{d},{s},{}", grid.bias[i][k]);
        }
    }
    out
}

/// Diverging blue–white–red colour for `t` in [−1, 1].
pub fn diverging_color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(-1.0, 1.0) } else { 0.0 };
    let (r, g, b) = if t >= 0.0 {
        (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
    } else {
        (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
    };
    // snap to 1e-6, then round
    let q = |c: f64| ((c * 1e6).round() / 1e6).round() as u8;
    format!("#{:02x}{:02x}{:02x}", q(r), q(g), q(b))
}

const PLOT: f64 = 400.0;
const MARGIN: f64 = 60.0;

struct Frame {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn new(grid: &SensitivityGrid) -> Frame {
        let span = |a: &[f64]| {
            let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        let (x_lo, x_hi) = span(&grid.shift_axis);
        let (y_lo, y_hi) = span(&grid.delta_axis);
        Frame { x_lo, x_hi, y_lo, y_hi }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x_lo) / (self.x_hi - self.x_lo) * PLOT
    }

    fn py(&self, y: f64) -> f64 {
        MARGIN + PLOT - (y - self.y_lo) / (self.y_hi - self.y_lo) * PLOT
    }
}

/// Cell edges around each lattice point (midpoints between neighbours).
fn cell_bounds(axis: &[f64]) -> Vec<(f64, f64)> {
    let n = axis.len();
    if n == 1 {
        return vec![(axis[0] - 0.5, axis[0] + 0.5)];
    }
    (0..n)
        .map(|i| {
            let lo = if i == 0 { axis[0] - (axis[1] - axis[0]) / 2.0 } else { (axis[i - 1] + axis[i]) / 2.0 };
            let hi = if i == n - 1 {
                axis[n - 1] + (axis[n - 1] - axis[n - 2]) / 2.0
            } else {
                (axis[i] + axis[i + 1]) / 2.0
            };
            (lo, hi)
        })
        .collect()
}

/// Marching-squares segments of `value = level` in (shift, delta) coordinates.
pub fn contour_segments(grid: &SensitivityGrid, level: f64) -> Vec<[(f64, f64); 2]> {
    let xs = &grid.shift_axis;
    let ys = &grid.delta_axis;
    let mut segs = Vec::new();
    if xs.len() < 2 || ys.len() < 2 {
        return segs;
    }
    let f = |i: usize, k: usize| grid.bias[i][k] - level;
    let interp = |p: (f64, f64), q: (f64, f64), fp: f64, fq: f64| {
        let t = if fp == fq { 0.5 } else { fp / (fp - fq) };
        (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
    };
    for i in 0..ys.len() - 1 {
        for k in 0..xs.len() - 1 {
            // corners counter-clockwise from (x_k, y_i)
            let c = [
                ((xs[k], ys[i]), f(i, k)),
                ((xs[k + 1], ys[i]), f(i, k + 1)),
                ((xs[k + 1], ys[i + 1]), f(i + 1, k + 1)),
                ((xs[k], ys[i + 1]), f(i + 1, k)),
            ];
            let mut pts = Vec::with_capacity(4);
            for e in 0..4 {
                let (p, fp) = c[e];
                let (q, fq) = c[(e + 1) % 4];
                if (fp > 0.0) != (fq > 0.0) {
                    pts.push(interp(p, q, fp, fq));
                }
            }
            match pts.len() {
                2 => segs.push([pts[0], pts[1]]),
                4 => {
                    let centre = c.iter().map(|(_, v)| v).sum::<f64>() / 4.0;
                    if (centre > 0.0) == (c[0].1 > 0.0) {
                        segs.push([pts[0], pts[3]]);
                        segs.push([pts[1], pts[2]]);
                    } else {
                        segs.push([pts[0], pts[1]]);
                        segs.push([pts[2], pts[3]]);
                    }
                }
                _ => {}
            }
        }
    }
    segs
}

fn render_svg(grid: &SensitivityGrid) -> String {
    let frame = Frame::new(grid);
    let max_abs = grid
        .bias
        .iter()
        .flatten()
        .map(|v| v.abs())
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let scale = if max_abs > 0.0 { max_abs } else { 1.0 };
    let size = PLOT + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(s, "<title>Sensitivity map for {}</title>", xml_escape(&grid.covariate));
    let _ = writeln!(s, r#"<g class="heatmap" shape-rendering="crispEdges">"#);
    let xb = cell_bounds(&grid.shift_axis);
    let yb = cell_bounds(&grid.delta_axis);
    for (i, &(y0, y1)) in yb.iter().enumerate() {
        for (k, &(x0, x1)) in xb.iter().enumerate() {
            let (px0, px1) = (frame.px(x0.max(frame.x_lo)), frame.px(x1.min(frame.x_hi)));
            let (py0, py1) = (frame.py(y1.min(frame.y_hi)), frame.py(y0.max(frame.y_lo)));
            let _ = writeln!(
                s,
                r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
                px0,
                py0,
                (px1 - px0).max(0.0),
                (py1 - py0).max(0.0),
                diverging_color(grid.bias[i][k] / scale)
            );
        }
    }
    let _ = writeln!(s, "</g>");
    let mut levels = vec![grid.threshold];
    if grid.threshold != 0.0 {
        levels.push(-grid.threshold);
    }
    for level in levels {
        let segs = contour_segments(grid, level);
        if segs.is_empty() {
            continue;
        }
        let mut d = String::new();
        for [a, b] in segs {
            let _ = write!(
                d,
                "M{:.3} {:.3}L{:.3} {:.3}",
                frame.px(a.0),
                frame.py(a.1),
                frame.px(b.0),
                frame.py(b.1)
            );
        }
        let _ = writeln!(
            s,
            r#"<path class="contour" data-level="{level}" d="{d}" fill="none" stroke="black" stroke-width="1.5"/>"#
        );
    }
    if let Some(m) = &grid.marker {
        let (cx, cy) = (frame.px(m.shift), frame.py(m.delta));
        let _ = writeln!(
            s,
            r#"<path class="marker" d="M{:.3} {:.3}L{:.3} {:.3}M{:.3} {:.3}L{:.3} {:.3}" stroke="black" stroke-width="2"/>"#,
            cx - 6.0,
            cy - 6.0,
            cx + 6.0,
            cy + 6.0,
            cx - 6.0,
            cy + 6.0,
            cx + 6.0,
            cy - 6.0
        );
        if m.delta_ci.is_some() || m.shift_ci.is_some() {
            let (sx0, sx1) = m.shift_ci.unwrap_or((m.shift, m.shift));
            let (dy0, dy1) = m.delta_ci.unwrap_or((m.delta, m.delta));
            let _ = writeln!(
                s,
                r#"<rect class="ci" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="none" stroke="black" stroke-dasharray="4 3"/>"#,
                frame.px(sx0),
                frame.py(dy1),
                frame.px(sx1) - frame.px(sx0),
                frame.py(dy0) - frame.py(dy1)
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{PLOT}" height="{PLOT}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">shift of {}</text>"#,
        MARGIN + PLOT / 2.0,
        size - 20.0,
        xml_escape(&grid.covariate)
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{}" text-anchor="middle" font-size="14" transform="rotate(-90 20 {})">delta of {}</text>"#,
        MARGIN + PLOT / 2.0,
        MARGIN + PLOT / 2.0,
        xml_escape(&grid.covariate)
    );
    for (x, label) in [(frame.x_lo, frame.x_lo), (frame.x_hi, frame.x_hi)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{}" text-anchor="middle" font-size="11">{label:.3}</text>"#,
            frame.px(x),
            MARGIN + PLOT + 15.0
        );
    }
    for (y, label) in [(frame.y_lo, frame.y_lo), (frame.y_hi, frame.y_hi)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.3}" text-anchor="end" font-size="11">{label:.3}</text>"#,
            MARGIN - 5.0,
            frame.py(y) + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
