//! Synthetic starts and goals for experiments: glyph relief targets and
//! raised test ridges.

use crate::error::{Error, Result};
use crate::field::HeightField;

/// Line strokes of a few block glyphs in normalized coordinates.
pub fn glyph_strokes(glyph: char) -> Result<Vec<((f64, f64), (f64, f64))>> {
    let s = match glyph.to_ascii_uppercase() {
        'X' => vec![((0.3, 0.3), (0.7, 0.7)), ((0.7, 0.3), (0.3, 0.7))],
        'I' => vec![((0.5, 0.3), (0.5, 0.7))],
        'L' => vec![((0.35, 0.3), (0.35, 0.7)), ((0.35, 0.7), (0.65, 0.7))],
        'V' => vec![((0.3, 0.3), (0.5, 0.7)), ((0.5, 0.7), (0.7, 0.3))],
        'T' => vec![((0.3, 0.3), (0.7, 0.3)), ((0.5, 0.3), (0.5, 0.7))],
        other => {
            return Err(Error::InvalidConfig(format!(
                "no stroke table for glyph '{other}'"
            )))
        }
    };
    Ok(s)
}

/// A goal with the glyph carved into the surface: depth increases by
/// `depth_mm` along each stroke with a Gaussian cross-section of `sigma_mm`.
pub fn carve_glyph_target(
    base: &HeightField,
    glyph: char,
    depth_mm: f64,
    sigma_mm: f64,
) -> Result<HeightField> {
    let strokes = glyph_strokes(glyph)?;
    carve_strokes_target(base, &strokes, depth_mm, sigma_mm)
}

/// Carves arbitrary normalized-coordinate strokes into `base`.
pub fn carve_strokes_target(
    base: &HeightField,
    strokes: &[((f64, f64), (f64, f64))],
    depth_mm: f64,
    sigma_mm: f64,
) -> Result<HeightField> {
    let (w, h) = (base.width(), base.height());
    let (w_mm, h_mm) = base.extent_mm();
    let cell = base.cell_size();
    let mut depths = base.depths().to_vec();
    for r in 0..h {
        for c in 0..w {
            let p = ((c as f64 + 0.5) * cell, (r as f64 + 0.5) * cell);
            let mut d_min = f64::INFINITY;
            for ((ax, ay), (bx, by)) in strokes {
                let a = (ax * w_mm, ay * h_mm);
                let b = (bx * w_mm, by * h_mm);
                d_min = d_min.min(dist_to_segment(p, a, b));
            }
            let bump = depth_mm * (-0.5 * (d_min / sigma_mm).powi(2)).exp();
            depths[r * w + c] = (depths[r * w + c] + bump).min(base.d_max());
        }
    }
    HeightField::new(w, h, cell, base.d_max(), depths)
}

/// A start state with a thin ridge of material raised above `base` along a
/// normalized-coordinate segment.
pub fn raised_ridge(
    base: &HeightField,
    from: (f64, f64),
    to: (f64, f64),
    height_mm: f64,
    sigma_mm: f64,
) -> Result<HeightField> {
    let (w, h) = (base.width(), base.height());
    let (w_mm, h_mm) = base.extent_mm();
    let cell = base.cell_size();
    let a = (from.0 * w_mm, from.1 * h_mm);
    let b = (to.0 * w_mm, to.1 * h_mm);
    let mut depths = base.depths().to_vec();
    for r in 0..h {
        for c in 0..w {
            let p = ((c as f64 + 0.5) * cell, (r as f64 + 0.5) * cell);
            let d = dist_to_segment(p, a, b);
            let bump = height_mm * (-0.5 * (d / sigma_mm).powi(2)).exp();
            depths[r * w + c] = (depths[r * w + c] - bump).max(0.0);
        }
    }
    HeightField::new(w, h, cell, base.d_max(), depths)
}

/// True if an action's swept path comes within `margin_mm` of the segment.
pub fn action_intersects_segment(
    action: &crate::field::Action,
    field: &HeightField,
    seg_from: (f64, f64),
    seg_to: (f64, f64),
    margin_mm: f64,
) -> bool {
    let (w_mm, h_mm) = field.extent_mm();
    let a = (seg_from.0 * w_mm, seg_from.1 * h_mm);
    let b = (seg_to.0 * w_mm, seg_to.1 * h_mm);
    let start = (action.x() * w_mm, action.y() * h_mm);
    let end = match action {
        crate::field::Action::Push(p) => (
            start.0 + p.theta.cos() * p.length_mm,
            start.1 + p.theta.sin() * p.length_mm,
        ),
        crate::field::Action::Pinch(_) => start,
    };
    segment_distance(start, end, a, b) <= margin_mm
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let ab = (b.0 - a.0, b.1 - a.1);
    let ap = (p.0 - a.0, p.1 - a.1);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let t = if len2 > 0.0 {
        ((ap.0 * ab.0 + ap.1 * ab.1) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = (a.0 + ab.0 * t, a.1 + ab.1 * t);
    ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
}

/// Minimum distance between two segments.
fn segment_distance(a0: (f64, f64), a1: (f64, f64), b0: (f64, f64), b1: (f64, f64)) -> f64 {
    if segments_intersect(a0, a1, b0, b1) {
        return 0.0;
    }
    dist_to_segment(a0, b0, b1)
        .min(dist_to_segment(a1, b0, b1))
        .min(dist_to_segment(b0, a0, a1))
        .min(dist_to_segment(b1, a0, a1))
}

fn segments_intersect(a0: (f64, f64), a1: (f64, f64), b0: (f64, f64), b1: (f64, f64)) -> bool {
    let cross = |o: (f64, f64), p: (f64, f64), q: (f64, f64)| {
        (p.0 - o.0) * (q.1 - o.1) - (p.1 - o.1) * (q.0 - o.0)
    };
    let d1 = cross(b0, b1, a0);
    let d2 = cross(b0, b1, a1);
    let d3 = cross(a0, a1, b0);
    let d4 = cross(a0, a1, b1);
    ((d1 > 0.0) != (d2 > 0.0)) && ((d3 > 0.0) != (d4 > 0.0))
}
