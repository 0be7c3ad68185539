//! Self-contained SVG emission for the link-function band plot: a band
//! polygon plus the curve polyline, with axes, written as direct path data.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// Applies the plotting normalization shared across methods: the curve is
/// centered to mean zero and the sign is aligned so the slope at the grid
/// midpoint is positive; the band moves with the curve (negation swaps the
/// band's roles).
pub fn normalize_curve(eta: &mut [f64], lo: &mut [f64], hi: &mut [f64]) {
    let n = eta.len();
    let mean = eta.iter().sum::<f64>() / n as f64;
    for v in eta.iter_mut() {
        *v -= mean;
    }
    for v in lo.iter_mut() {
        *v -= mean;
    }
    for v in hi.iter_mut() {
        *v -= mean;
    }
    let mid = n / 2;
    let slope = eta[(mid + 1).min(n - 1)] - eta[mid.saturating_sub(1)];
    if slope < 0.0 {
        for v in eta.iter_mut() {
            *v = -*v;
        }
        for j in 0..n {
            let (l, h) = (lo[j], hi[j]);
            lo[j] = -h;
            hi[j] = -l;
        }
    }
}

fn px(v: f64) -> String {
    format!("{v:.2}")
}

/// Renders the band plot. `grid` is in raw index units; `eta`, `lo`, `hi`
/// must already be normalized if a common identifiability scale is wanted.
pub fn band_svg(grid: &[f64], eta: &[f64], lo: &[f64], hi: &[f64]) -> String {
    assert!(grid.len() >= 2, "need at least two grid points");
    assert!(grid.len() == eta.len() && eta.len() == lo.len() && lo.len() == hi.len());
    let (x0, x1) = (grid[0], grid[grid.len() - 1]);
    let mut y0 = f64::INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for j in 0..grid.len() {
        y0 = y0.min(lo[j]);
        y1 = y1.max(hi[j]);
    }
    let pad = 0.05 * (y1 - y0).max(1e-12);
    y0 -= pad;
    y1 += pad;

    let sx = (WIDTH - 2.0 * MARGIN) / (x1 - x0).max(1e-300);
    let sy = (HEIGHT - 2.0 * MARGIN) / (y1 - y0).max(1e-300);
    let map_x = |u: f64| MARGIN + (u - x0) * sx;
    let map_y = |v: f64| HEIGHT - MARGIN - (v - y0) * sy;

    let mut band = String::new();
    for (j, &u) in grid.iter().enumerate() {
        let _ = write!(band, "{}{},{} ", if j == 0 { "" } else { " " }, px(map_x(u)), px(map_y(hi[j])));
    }
    for (j, &u) in grid.iter().enumerate().rev() {
        let _ = write!(band, " {},{}", px(map_x(u)), px(map_y(lo[j])));
    }

    let mut curve = String::new();
    for (j, &u) in grid.iter().enumerate() {
        if j > 0 {
            curve.push(' ');
        }
        let _ = write!(curve, "{},{}", px(map_x(u)), px(map_y(eta[j])));
    }

    let mut ticks = String::new();
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let u = x0 + t * (x1 - x0);
        let v = y0 + t * (y1 - y0);
        let xx = map_x(u);
        let yy = map_y(v);
        let _ = write!(
            ticks,
            r##"  <line x1="{x}" y1="{b}" x2="{x}" y2="{b2}" stroke="#333" stroke-width="1"/>
  <text x="{x}" y="{tx}" font-size="11" text-anchor="middle" font-family="monospace">{ul}</text>
  <line x1="{l}" y1="{y}" x2="{l2}" y2="{y}" stroke="#333" stroke-width="1"/>
  <text x="{ty}" y="{yb}" font-size="11" text-anchor="end" font-family="monospace">{vl}</text>
"##,
            x = px(xx),
            b = px(HEIGHT - MARGIN),
            b2 = px(HEIGHT - MARGIN + 5.0),
            tx = px(HEIGHT - MARGIN + 18.0),
            ul = format_tick(u),
            l = px(MARGIN - 5.0),
            l2 = px(MARGIN),
            y = px(yy),
            ty = px(MARGIN - 8.0),
            yb = px(yy + 4.0),
            vl = format_tick(v),
        );
    }

    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">
  <rect width="{w}" height="{h}" fill="white"/>
  <polygon points="{band}" fill="#9ecae1" fill-opacity="0.6" stroke="none"/>
  <polyline points="{curve}" fill="none" stroke="#08519c" stroke-width="1.5"/>
  <line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="#333" stroke-width="1"/>
  <line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="#333" stroke-width="1"/>
{ticks}</svg>
"##,
        w = px(WIDTH),
        h = px(HEIGHT),
        m = px(MARGIN),
        r = px(WIDTH - MARGIN),
        t = px(MARGIN),
        b = px(HEIGHT - MARGIN),
    )
}

fn format_tick(v: f64) -> String {
    format!("{v:.3}")
}
