//! Deterministic SVG snapshots: iso-density contours of the conditional
//! mixture (marching squares on a fixed grid) with one circle per particle.
//! Byte-identical output for identical inputs, so snapshots diff cleanly.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use sdlab_core::oracle::{Condition, Oracle};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SvgInfo {
    pub circles: usize,
    pub polylines: usize,
    /// True when the cloud has more than two coordinates and only the first
    /// two were drawn.
    pub truncated: bool,
}

const GRID: usize = 121;
const LEVEL_FRACTIONS: [f64; 3] = [0.5, 0.1, 0.02];
const LEVEL_STROKES: [&str; 3] = ["#5c7a99", "#8aa0b4", "#c4d1db"];
const CANVAS_W: f64 = 640.0;

struct Projected {
    weights: Vec<f64>,
    means: Vec<[f64; 2]>,
    vars: Vec<[f64; 2]>,
}

/// Marginalize the conditional mixture onto the first two coordinates.
/// Diagonal covariances make this exact: drop the other axes.
fn project(oracle: &Oracle, cond: &Condition) -> Result<Projected> {
    let gmm = oracle.gmm();
    let cw = cond.conditional_weights(gmm)?;
    let mut weights = Vec::new();
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for i in 0..gmm.component_count() {
        if cw[i] <= 0.0 {
            continue;
        }
        weights.push(cw[i]);
        means.push([gmm.means()[(i, 0)], gmm.means()[(i, 1)]]);
        vars.push([gmm.cov_diags()[(i, 0)], gmm.cov_diags()[(i, 1)]]);
    }
    Ok(Projected {
        weights,
        means,
        vars,
    })
}

fn density(p: &Projected, x: f64, y: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..p.weights.len() {
        let dx = x - p.means[i][0];
        let dy = y - p.means[i][1];
        let (vx, vy) = (p.vars[i][0], p.vars[i][1]);
        let quad = dx * dx / vx + dy * dy / vy;
        total +=
            p.weights[i] * (-0.5 * quad).exp() / (2.0 * std::f64::consts::PI * (vx * vy).sqrt());
    }
    total
}

type Pt = (f64, f64);

/// Linear interpolation of the level crossing between two grid nodes.
fn lerp(level: f64, a: f64, b: f64, pa: Pt, pb: Pt) -> Pt {
    let t = if (b - a).abs() < 1e-300 {
        0.5
    } else {
        ((level - a) / (b - a)).clamp(0.0, 1.0)
    };
    (pa.0 + t * (pb.0 - pa.0), pa.1 + t * (pb.1 - pa.1))
}

/// Marching squares over one cell; appends 0–2 segments.
#[allow(clippy::too_many_arguments)]
fn cell_segments(
    level: f64,
    v00: f64,
    v10: f64,
    v11: f64,
    v01: f64,
    x: f64,
    y: f64,
    dx: f64,
    dy: f64,
    out: &mut Vec<(Pt, Pt)>,
) {
    let mask = (usize::from(v00 >= level))
        | (usize::from(v10 >= level) << 1)
        | (usize::from(v11 >= level) << 2)
        | (usize::from(v01 >= level) << 3);
    if mask == 0 || mask == 15 {
        return;
    }
    let bottom = || lerp(level, v00, v10, (x, y), (x + dx, y));
    let right = || lerp(level, v10, v11, (x + dx, y), (x + dx, y + dy));
    let top = || lerp(level, v01, v11, (x, y + dy), (x + dx, y + dy));
    let left = || lerp(level, v00, v01, (x, y), (x, y + dy));
    match mask {
        1 | 14 => out.push((left(), bottom())),
        2 | 13 => out.push((bottom(), right())),
        3 | 12 => out.push((left(), right())),
        4 | 11 => out.push((right(), top())),
        6 | 9 => out.push((bottom(), top())),
        7 | 8 => out.push((left(), top())),
        5 | 10 => {
            // Saddle: split by the cell-center value.
            let center = 0.25 * (v00 + v10 + v11 + v01);
            let center_inside = center >= level;
            if (mask == 5) == center_inside {
                out.push((left(), top()));
                out.push((bottom(), right()));
            } else {
                out.push((left(), bottom()));
                out.push((right(), top()));
            }
        }
        _ => unreachable!(),
    }
}

/// Chain shared-endpoint segments into polylines. Endpoints coming from the
/// same grid edge are bit-identical, so quantized keys only guard against
/// pathological float noise.
fn chain(segments: &[(Pt, Pt)], quantum: f64) -> Vec<Vec<Pt>> {
    let key = |p: Pt| -> (i64, i64) {
        (
            (p.0 / quantum).round() as i64,
            (p.1 / quantum).round() as i64,
        )
    };
    let mut adj: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, (a, b)) in segments.iter().enumerate() {
        adj.entry(key(*a)).or_default().push(i);
        adj.entry(key(*b)).or_default().push(i);
    }
    let mut used = vec![false; segments.len()];
    let mut polylines = Vec::new();
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let mut line = std::collections::VecDeque::from([segments[start].0, segments[start].1]);
        for forward in [true, false] {
            loop {
                let tip = if forward {
                    *line.back().unwrap()
                } else {
                    *line.front().unwrap()
                };
                let Some(candidates) = adj.get(&key(tip)) else {
                    break;
                };
                let mut extended = false;
                for &j in candidates {
                    if used[j] {
                        continue;
                    }
                    let (a, b) = segments[j];
                    let next = if key(a) == key(tip) {
                        b
                    } else if key(b) == key(tip) {
                        a
                    } else {
                        continue;
                    };
                    used[j] = true;
                    if forward {
                        line.push_back(next);
                    } else {
                        line.push_front(next);
                    }
                    extended = true;
                    break;
                }
                if !extended {
                    break;
                }
            }
        }
        polylines.push(line.into_iter().collect());
    }
    polylines
}

/// Render `points` over the conditional mixture contours. Clouds with more
/// than two coordinates are projected onto the first two (reported via
/// `truncated`); fewer than two is an error, as is an empty cloud.
pub fn emit_svg(
    points: &Array2<f64>,
    oracle: &Oracle,
    cond: &Condition,
    path: &Path,
) -> Result<SvgInfo> {
    let n = points.nrows();
    if n == 0 {
        return Err(HarnessError::Config(
            "plot needs at least one particle".into(),
        ));
    }
    let d = points.ncols();
    if d < 2 || oracle.dim() < 2 {
        return Err(HarnessError::Config(format!(
            "plot needs dim >= 2 (cloud dim {d}, mixture dim {})",
            oracle.dim()
        )));
    }
    let truncated = d > 2;
    let proj = project(oracle, cond)?;

    // Bounding box: particles plus 3.5σ around every supported mean, then a
    // 10% margin per side.
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for i in 0..n {
        xmin = xmin.min(points[(i, 0)]);
        xmax = xmax.max(points[(i, 0)]);
        ymin = ymin.min(points[(i, 1)]);
        ymax = ymax.max(points[(i, 1)]);
    }
    for i in 0..proj.weights.len() {
        let sx = 3.5 * proj.vars[i][0].sqrt();
        let sy = 3.5 * proj.vars[i][1].sqrt();
        xmin = xmin.min(proj.means[i][0] - sx);
        xmax = xmax.max(proj.means[i][0] + sx);
        ymin = ymin.min(proj.means[i][1] - sy);
        ymax = ymax.max(proj.means[i][1] + sy);
    }
    let pad = |lo: &mut f64, hi: &mut f64| {
        let r = *hi - *lo;
        let m = if r > 0.0 { 0.1 * r } else { 1.0 };
        *lo -= m;
        *hi += m;
    };
    pad(&mut xmin, &mut xmax);
    pad(&mut ymin, &mut ymax);
    let (xr, yr) = (xmax - xmin, ymax - ymin);

    // Density on the node grid.
    let dx = xr / (GRID - 1) as f64;
    let dy = yr / (GRID - 1) as f64;
    let mut values = vec![0.0; GRID * GRID];
    let mut vmax = 0.0_f64;
    for gy in 0..GRID {
        for gx in 0..GRID {
            let v = density(&proj, xmin + gx as f64 * dx, ymin + gy as f64 * dy);
            values[gy * GRID + gx] = v;
            vmax = vmax.max(v);
        }
    }

    let canvas_h = CANVAS_W * yr / xr;
    let to_px = |p: Pt| -> Pt { ((p.0 - xmin) / xr * CANVAS_W, (ymax - p.1) / yr * canvas_h) };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {CANVAS_W:.1} {canvas_h:.1}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{CANVAS_W:.1}\" height=\"{canvas_h:.1}\" fill=\"#ffffff\"/>\n"
    ));

    let mut polyline_count = 0;
    for (li, frac) in LEVEL_FRACTIONS.iter().enumerate() {
        let level = vmax * frac;
        let mut segments = Vec::new();
        for gy in 0..GRID - 1 {
            for gx in 0..GRID - 1 {
                cell_segments(
                    level,
                    values[gy * GRID + gx],
                    values[gy * GRID + gx + 1],
                    values[(gy + 1) * GRID + gx + 1],
                    values[(gy + 1) * GRID + gx],
                    xmin + gx as f64 * dx,
                    ymin + gy as f64 * dy,
                    dx,
                    dy,
                    &mut segments,
                );
            }
        }
        let quantum = 1e-9 * xr.max(yr);
        for line in chain(&segments, quantum) {
            let mut data = String::new();
            for (k, p) in line.iter().enumerate() {
                let (px, py) = to_px(*p);
                data.push_str(if k == 0 { "M" } else { " L" });
                data.push_str(&format!("{px:.2} {py:.2}"));
            }
            svg.push_str(&format!(
                "<path d=\"{data}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.2\"/>\n",
                LEVEL_STROKES[li]
            ));
            polyline_count += 1;
        }
    }

    for i in 0..n {
        let (px, py) = to_px((points[(i, 0)], points[(i, 1)]));
        svg.push_str(&format!(
            "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3.5\" fill=\"#d9622b\" \
             fill-opacity=\"0.85\"/>\n"
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(SvgInfo {
        circles: n,
        polylines: polyline_count,
        truncated,
    })
}
