//! Rigid canonical-pose warps with bilinear sampling.
//!
//! Every deformation is predicted in a constant pose: the action starts at a
//! fixed anchor pixel and points along +x. `to_canonical` re-poses the state
//! around an action into that frame; `from_canonical` places a predicted
//! delta patch back onto the field. Both are rotation+translation warps
//! sampled bilinearly (the camera is fixed top-down, so no projective
//! distortion exists between poses) and both are linear in the sampled
//! values, which keeps them differentiable end-to-end.
//!
//! Patch cells have the same physical pitch as field cells, so the warp is
//! purely rigid. `to_canonical` replicates the border so warps of near-flat
//! fields stay near-flat; `from_canonical` pads with zero because it carries
//! additive deltas.

use crate::error::{Error, Result};
use crate::field::action::{Action, ActionKind, Pose};
use crate::field::{gradient_into, sample_bilinear_clamped, HeightField};

/// Square grid holding state (or a state delta) around an action, re-posed
/// so the action starts at the anchor and points along +x.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalPatch {
    side: usize,
    cell_size: f64,
    values: Vec<f64>,
}

impl CanonicalPatch {
    pub fn new(side: usize, cell_size: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != side * side {
            return Err(Error::ShapeMismatch {
                expected: format!("{side}x{side}"),
                got: format!("{}", values.len()),
            });
        }
        Ok(Self {
            side,
            cell_size,
            values,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Central-difference gradient channels of the patch (mm per mm).
    pub fn gradient(&self) -> (Vec<f64>, Vec<f64>) {
        let mut dx = vec![0.0; self.values.len()];
        let mut dy = vec![0.0; self.values.len()];
        gradient_into(
            &self.values,
            self.side,
            self.side,
            self.cell_size,
            &mut dx,
            &mut dy,
        );
        (dx, dy)
    }
}

/// Patch shape plus the anchor pixel the action start maps to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchGeometry {
    pub side: usize,
    pub anchor_x: f64,
    pub anchor_y: f64,
}

/// Anchor convention: pushes start a quarter of the way in from the left
/// (room for the forward sweep and its ridge), pinches sit at the centre
/// (their deformation is symmetric about the grip point).
pub fn anchor_for(side: usize, kind: ActionKind) -> PatchGeometry {
    let mid = (side as f64 - 1.0) / 2.0;
    let (ax, ay) = match kind {
        ActionKind::Push => ((side / 4) as f64, mid),
        ActionKind::Pinch => (mid, mid),
    };
    PatchGeometry {
        side,
        anchor_x: ax,
        anchor_y: ay,
    }
}

/// Patch cell -> field cell coordinates under a pose.
#[inline]
pub fn warp_patch_to_field_coords(
    geom: &PatchGeometry,
    pose: &Pose,
    pc: f64,
    pr: f64,
) -> (f64, f64) {
    let (s, c) = pose.theta.sin_cos();
    let u = pc - geom.anchor_x;
    let v = pr - geom.anchor_y;
    (
        pose.start_x + u * c - v * s,
        pose.start_y + u * s + v * c,
    )
}

/// Field cell -> patch cell coordinates under a pose (inverse rigid warp).
#[inline]
pub fn warp_field_to_patch_coords(
    geom: &PatchGeometry,
    pose: &Pose,
    fc: f64,
    fr: f64,
) -> (f64, f64) {
    let (s, c) = pose.theta.sin_cos();
    let dx = fc - pose.start_x;
    let dy = fr - pose.start_y;
    (
        geom.anchor_x + dx * c + dy * s,
        geom.anchor_y - dx * s + dy * c,
    )
}

/// Re-poses the state around `action` into the canonical frame.
pub fn to_canonical(field: &HeightField, action: &Action, side: usize) -> CanonicalPatch {
    let geom = anchor_for(side, action.kind());
    let pose = action.pose(field);
    let mut values = vec![0.0; side * side];
    to_canonical_kernel(
        field.depths(),
        field.width(),
        field.height(),
        &geom,
        &pose,
        &mut values,
    );
    CanonicalPatch {
        side,
        cell_size: field.cell_size(),
        values,
    }
}

pub(crate) fn to_canonical_kernel(
    src: &[f64],
    src_w: usize,
    src_h: usize,
    geom: &PatchGeometry,
    pose: &Pose,
    out: &mut [f64],
) {
    for pr in 0..geom.side {
        for pc in 0..geom.side {
            let (fx, fy) = warp_patch_to_field_coords(geom, pose, pc as f64, pr as f64);
            out[pr * geom.side + pc] = sample_bilinear_clamped(src, src_w, src_h, fx, fy);
        }
    }
}

/// Places a canonical delta patch back onto the field grid. Cells outside
/// the patch footprint receive delta 0.
pub fn from_canonical(
    patch: &CanonicalPatch,
    action: &Action,
    field: &HeightField,
) -> Vec<f64> {
    let mut out = vec![0.0; field.width() * field.height()];
    from_canonical_into(patch, action, field, &mut out);
    out
}

pub fn from_canonical_into(
    patch: &CanonicalPatch,
    action: &Action,
    field: &HeightField,
    out: &mut [f64],
) {
    let geom = anchor_for(patch.side, action.kind());
    let pose = action.pose(field);
    from_canonical_kernel(
        &patch.values,
        &geom,
        &pose,
        field.width(),
        field.height(),
        out,
    );
}

pub(crate) fn from_canonical_kernel(
    patch: &[f64],
    geom: &PatchGeometry,
    pose: &Pose,
    dst_w: usize,
    dst_h: usize,
    out: &mut [f64],
) {
    for fr in 0..dst_h {
        for fc in 0..dst_w {
            let (px, py) = warp_field_to_patch_coords(geom, pose, fc as f64, fr as f64);
            out[fr * dst_w + fc] = sample_bilinear_zero(patch, geom.side, geom.side, px, py);
        }
    }
}

/// Bilinear sample where taps outside the grid contribute zero.
#[inline]
pub(crate) fn sample_bilinear_zero(values: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    if x <= -1.0 || y <= -1.0 || x >= width as f64 || y >= height as f64 {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        let yy = y0 as i64 + dy;
        if yy < 0 || yy >= height as i64 {
            continue;
        }
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let xx = x0 as i64 + dx;
            if xx < 0 || xx >= width as i64 {
                continue;
            }
            acc += wy * wx * values[yy as usize * width + xx as usize];
        }
    }
    acc
}
