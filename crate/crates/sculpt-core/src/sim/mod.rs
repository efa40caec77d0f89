//! Synthetic ground-truth deformation oracle.
//!
//! Stands in for the real material and robot: applies push/pinch actions to
//! a heightfield under material- and tool-specific rules and returns the
//! scan the sensor would capture. The rules are deliberately simple
//! (capsule excavation, Gaussian ridge redistribution, angle-of-repose
//! relaxation) but materially distinct, so that models trained on one
//! preset transfer poorly to presets with different mechanics.

mod dataset;

pub use dataset::{
    generate_dataset, load_manifest, load_training_records, DatasetConfig, DatasetManifest,
    FieldMeta, RecordMeta, ToolSpec, TrainingRecord,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Action, HeightField, PinchAction, PushAction, EPS_TABLE_MM};

/// Tool-surface height used outside the physical footprint; anything this
/// far above the tip never makes contact at sane penetrations.
const STAMP_SKY_MM: f64 = 30.0;

const UNBOUNDED: crate::field::ActionBounds = crate::field::ActionBounds {
    l_max_mm: f64::INFINITY,
    z_max_mm: f64::INFINITY,
    c_max_mm: f64::INFINITY,
};

/// Material behaviour parameters of the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub name: String,
    /// Fraction of displaced volume redistributed to a ridge along the tool
    /// path, in `[0, 1]`.
    pub plasticity: f64,
    /// Gaussian spread of redistributed material, mm.
    pub ridge_sigma_mm: f64,
    /// Max stable surface slope; `None` for cohesive materials.
    pub repose_tangent: Option<f64>,
    /// Fraction of indentation recovered after tool lift, in `[0, 1)`.
    pub elastic_rebound: f64,
    /// Additive Gaussian sensor noise per returned scan, mm.
    pub noise_sigma_mm: f64,
}

impl MaterialSpec {
    pub fn foam() -> Self {
        Self {
            name: "foam".into(),
            plasticity: 0.6,
            ridge_sigma_mm: 4.0,
            repose_tangent: None,
            elastic_rebound: 0.15,
            noise_sigma_mm: 0.05,
        }
    }

    pub fn dough() -> Self {
        Self {
            name: "dough".into(),
            plasticity: 0.9,
            ridge_sigma_mm: 6.0,
            repose_tangent: None,
            elastic_rebound: 0.02,
            noise_sigma_mm: 0.05,
        }
    }

    /// Sand relaxes to its angle of repose, which also forces a noise-free
    /// scan: the repose bound is a hard post-condition of every action.
    pub fn sand() -> Self {
        Self {
            name: "sand".into(),
            plasticity: 0.3,
            ridge_sigma_mm: 2.0,
            repose_tangent: Some(0.7),
            elastic_rebound: 0.0,
            noise_sigma_mm: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "foam" => Ok(Self::foam()),
            "dough" => Ok(Self::dough()),
            "sand" => Ok(Self::sand()),
            other => Err(Error::InvalidConfig(format!("unknown material preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        if !frac(self.plasticity) {
            return Err(Error::InvalidConfig("plasticity outside [0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.elastic_rebound) {
            return Err(Error::InvalidConfig("elastic_rebound outside [0,1)".into()));
        }
        if self.ridge_sigma_mm < 0.0 || self.noise_sigma_mm < 0.0 {
            return Err(Error::InvalidConfig("negative sigma".into()));
        }
        if let Some(t) = self.repose_tangent {
            if !(t > 0.0) {
                return Err(Error::InvalidConfig("repose_tangent must be > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum ToolShape {
    /// Cylindrical rod with a spherical-cap bottom.
    Rod { radius_mm: f64 },
    /// Flat bar, long axis lateral to the travel direction.
    Bar { width_mm: f64, thickness_mm: f64 },
    /// V-groove blade along the travel direction.
    Wedge { width_mm: f64, thickness_mm: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolMode {
    SingleTip,
    GripperPair,
}

/// End-effector description: a rasterized bottom-surface stamp plus mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolProfile {
    pub shape: ToolShape,
    pub compliance: f64,
    pub mode: ToolMode,
    /// Jaw separation of an open gripper, mm (gripper-pair mode only).
    pub gripper_span_mm: f64,
    stamp: Stamp,
}

impl ToolProfile {
    pub fn new(shape: ToolShape, compliance: f64, mode: ToolMode) -> Result<Self> {
        if !(0.0..=1.0).contains(&compliance) {
            return Err(Error::InvalidConfig("compliance outside [0,1]".into()));
        }
        let stamp = Stamp::rasterize(&shape, compliance)?;
        Ok(Self {
            shape,
            compliance,
            mode,
            gripper_span_mm: 50.0,
            stamp,
        })
    }

    pub fn rod(radius_mm: f64, compliance: f64, mode: ToolMode) -> Result<Self> {
        Self::new(ToolShape::Rod { radius_mm }, compliance, mode)
    }

    /// Outermost radius at which the tool can make contact, mm.
    pub fn contact_radius_mm(&self) -> f64 {
        self.stamp.outer_radius_mm
    }
}

/// Tool bottom surface sampled on a small grid: values are heights above
/// the tip in mm, `STAMP_SKY_MM` outside the footprint.
#[derive(Debug, Clone, PartialEq)]
struct Stamp {
    side: usize,
    cell_mm: f64,
    dz: Vec<f64>,
    outer_radius_mm: f64,
}

impl Stamp {
    fn rasterize(shape: &ToolShape, compliance: f64) -> Result<Self> {
        let (extent, ok) = match *shape {
            ToolShape::Rod { radius_mm } => (radius_mm, radius_mm > 0.0),
            ToolShape::Bar {
                width_mm,
                thickness_mm,
            }
            | ToolShape::Wedge {
                width_mm,
                thickness_mm,
            } => (
                0.5 * width_mm.max(thickness_mm),
                width_mm > 0.0 && thickness_mm > 0.0,
            ),
        };
        if !ok {
            return Err(Error::InvalidConfig("non-positive tool dimensions".into()));
        }
        let blur_sigma = 2.0 * compliance;
        let cell_mm = 0.5;
        let margin = 1.0 + 3.0 * blur_sigma;
        let half = ((extent + margin) / cell_mm).ceil() as usize;
        let side = 2 * half + 1;
        let mut dz = vec![STAMP_SKY_MM; side * side];
        for r in 0..side {
            for c in 0..side {
                // u along travel, v lateral
                let u = (c as f64 - half as f64) * cell_mm;
                let v = (r as f64 - half as f64) * cell_mm;
                let h = match *shape {
                    ToolShape::Rod { radius_mm } => {
                        let d2 = u * u + v * v;
                        if d2 <= radius_mm * radius_mm {
                            radius_mm - (radius_mm * radius_mm - d2).sqrt()
                        } else {
                            STAMP_SKY_MM
                        }
                    }
                    ToolShape::Bar {
                        width_mm,
                        thickness_mm,
                    } => {
                        if v.abs() <= 0.5 * width_mm && u.abs() <= 0.5 * thickness_mm {
                            0.0
                        } else {
                            STAMP_SKY_MM
                        }
                    }
                    ToolShape::Wedge {
                        width_mm,
                        thickness_mm,
                    } => {
                        if v.abs() <= 0.5 * width_mm && u.abs() <= 0.5 * thickness_mm {
                            v.abs() // 45 degree V-groove
                        } else {
                            STAMP_SKY_MM
                        }
                    }
                };
                dz[r * side + c] = h.min(STAMP_SKY_MM);
            }
        }
        if blur_sigma > 0.0 {
            gaussian_blur(&mut dz, side, blur_sigma / cell_mm);
        }
        // contact radius: farthest sample that can touch at full penetration
        let mut outer: f64 = 0.0;
        for r in 0..side {
            for c in 0..side {
                if dz[r * side + c] < STAMP_SKY_MM * 0.9 {
                    let u = (c as f64 - half as f64) * cell_mm;
                    let v = (r as f64 - half as f64) * cell_mm;
                    outer = outer.max((u * u + v * v).sqrt());
                }
            }
        }
        Ok(Self {
            side,
            cell_mm,
            dz,
            outer_radius_mm: outer,
        })
    }

    /// Bilinear sample of the bottom surface at tool-local mm offsets.
    #[inline]
    fn sample(&self, u_mm: f64, v_mm: f64) -> f64 {
        let half = (self.side / 2) as f64;
        let x = u_mm / self.cell_mm + half;
        let y = v_mm / self.cell_mm + half;
        if x < 0.0 || y < 0.0 || x > (self.side - 1) as f64 || y > (self.side - 1) as f64 {
            return STAMP_SKY_MM;
        }
        crate::field::sample_bilinear_clamped(&self.dz, self.side, self.side, x, y)
    }
}

fn gaussian_blur(values: &mut [f64], side: usize, sigma_cells: f64) {
    let radius = (3.0 * sigma_cells).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut total = 0.0;
    for k in -radius..=radius {
        let w = (-0.5 * (k as f64 / sigma_cells).powi(2)).exp();
        kernel.push(w);
        total += w;
    }
    for w in &mut kernel {
        *w /= total;
    }
    let mut tmp = vec![0.0; values.len()];
    for r in 0..side {
        for c in 0..side {
            let mut acc = 0.0;
            for (ki, w) in kernel.iter().enumerate() {
                let cc = (c as i64 + ki as i64 - radius).clamp(0, side as i64 - 1) as usize;
                acc += w * values[r * side + cc];
            }
            tmp[r * side + c] = acc;
        }
    }
    for r in 0..side {
        for c in 0..side {
            let mut acc = 0.0;
            for (ki, w) in kernel.iter().enumerate() {
                let rr = (r as i64 + ki as i64 - radius).clamp(0, side as i64 - 1) as usize;
                acc += w * tmp[rr * side + c];
            }
            values[r * side + c] = acc;
        }
    }
}

/// Applies a push action and returns the post-action scan.
///
/// Deterministic given the seed. Pipeline: swept excavation (penetration
/// ramps linearly from 0 to `depth_mm`), elastic rebound, plastic ridge
/// deposition, repose relaxation for granular materials, then a single
/// seeded scan-noise pass.
pub fn apply_push(
    state: &HeightField,
    action: &PushAction,
    material: &MaterialSpec,
    tool: &ToolProfile,
    seed: u64,
) -> Result<HeightField> {
    if tool.mode != ToolMode::SingleTip {
        return Err(Error::InvalidAction(
            "push requires a single-tip tool".into(),
        ));
    }
    material.validate()?;
    // position/direction validity; shape maxima are the caller's contract
    action.validate(&UNBOUNDED)?;

    let mut out = state.clone();
    let mut exc = vec![0.0; out.depths().len()];

    // zero penetration never deforms: the tool glides on the surface
    if action.depth_mm > 0.0 {
        let (w_mm, h_mm) = state.extent_mm();
        let p0 = (action.x * w_mm, action.y * h_mm);
        let dir = (action.theta.cos(), action.theta.sin());
        let p1 = (
            p0.0 + dir.0 * action.length_mm,
            p0.1 + dir.1 * action.length_mm,
        );
        sweep_excavate(
            state, &mut exc, tool, p0, p1, action.theta, action.depth_mm,
        );
        finish_deformation(&mut out, &mut exc, material, &[(p0, p1)], tool.contact_radius_mm());
    }

    relax_and_scan(&mut out, material, seed);
    Ok(out)
}

/// Applies a pinch: two mirrored jaw stamps plunge to `depth_mm` and close
/// along `theta` by `close_dist_mm`; squeezed material rises between the
/// jaws with stochastic crumbling proportional to the close distance.
pub fn apply_pinch(
    state: &HeightField,
    action: &PinchAction,
    material: &MaterialSpec,
    tool: &ToolProfile,
    seed: u64,
) -> Result<HeightField> {
    if tool.mode != ToolMode::GripperPair {
        return Err(Error::InvalidAction(
            "pinch requires a gripper-pair tool".into(),
        ));
    }
    material.validate()?;
    action.validate(&UNBOUNDED)?;
    if action.close_dist_mm >= tool.gripper_span_mm {
        return Err(Error::InvalidAction(format!(
            "close_dist {} exceeds gripper span {}",
            action.close_dist_mm, tool.gripper_span_mm
        )));
    }

    let mut out = state.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    if action.depth_mm > 0.0 || action.close_dist_mm > 0.0 {
        let (w_mm, h_mm) = state.extent_mm();
        let center = (action.x * w_mm, action.y * h_mm);
        let dir = (action.theta.cos(), action.theta.sin());
        let span = tool.gripper_span_mm;
        let final_sep = span - action.close_dist_mm;

        let mut exc = vec![0.0; out.depths().len()];
        let cell = state.cell_size();
        let n_steps = ((action.close_dist_mm / (0.5 * cell)).ceil() as usize).max(1) + 1;
        // reference surface depths under the jaws before contact
        let jaw_ref = |p: (f64, f64)| state.sample(p.0 / cell - 0.5, p.1 / cell - 0.5);
        for side_sign in [-1.0, 1.0] {
            let start = (
                center.0 + side_sign * dir.0 * span * 0.5,
                center.1 + side_sign * dir.1 * span * 0.5,
            );
            let end = (
                center.0 + side_sign * dir.0 * final_sep * 0.5,
                center.1 + side_sign * dir.1 * final_sep * 0.5,
            );
            let d_ref = jaw_ref(start);
            for i in 0..n_steps {
                let s = i as f64 / (n_steps - 1).max(1) as f64;
                let pos = (
                    start.0 + (end.0 - start.0) * s,
                    start.1 + (end.1 - start.1) * s,
                );
                let tip = d_ref + action.depth_mm * s;
                stamp_excavate(state, &mut exc, &tool.stamp, pos, action.theta, tip);
            }
        }

        // rebound, then squeeze displaced material upward between the jaws
        let rb = 1.0 - material.elastic_rebound;
        let cell_area = cell * cell;
        let mut displaced = 0.0;
        for e in exc.iter_mut() {
            *e *= rb;
            displaced += *e;
        }
        displaced *= cell_area;
        for (d, e) in out.depths_mut().iter_mut().zip(&exc) {
            *d += e;
        }

        if displaced > 0.0 && material.plasticity > 0.0 {
            let sigma_along = (final_sep * 0.25).max(2.0);
            let sigma_lat = tool.contact_radius_mm().max(2.0);
            let (w, h) = (out.width(), out.height());
            let mut weights = vec![0.0; w * h];
            let mut total_w = 0.0;
            for r in 0..h {
                for c in 0..w {
                    let i = r * w + c;
                    if exc[i] > 0.0 {
                        continue;
                    }
                    let px = (c as f64 + 0.5) * cell - center.0;
                    let py = (r as f64 + 0.5) * cell - center.1;
                    let u = px * dir.0 + py * dir.1;
                    let v = -px * dir.1 + py * dir.0;
                    let q = (u / sigma_along).powi(2) + (v / sigma_lat).powi(2);
                    if q < 16.0 {
                        weights[i] = (-0.5 * q).exp();
                        total_w += weights[i];
                    }
                }
            }
            if total_w > 0.0 {
                let scale = material.plasticity * displaced / (total_w * cell_area);
                // crumbling: high-frequency noise proportional to close_dist
                let crumble = Normal::new(0.0, 1.0).expect("valid normal");
                let crumble_scale = 0.08 * action.close_dist_mm;
                let depths = out.depths_mut();
                for i in 0..depths.len() {
                    if weights[i] > 0.0 {
                        let grain: f64 = crumble.sample(&mut rng);
                        let deposit = weights[i] * scale * (1.0 + 0.35 * grain)
                            + crumble_scale * weights[i].sqrt() * grain;
                        depths[i] -= deposit;
                    }
                }
            }
        }
    }

    relax_and_scan(&mut out, material, rng.gen());
    Ok(out)
}

/// Dispatches either action kind; dataset generation and MPC execution work
/// through this single entry point.
pub fn apply_action(
    state: &HeightField,
    action: &Action,
    material: &MaterialSpec,
    tool: &ToolProfile,
    seed: u64,
) -> Result<HeightField> {
    match action {
        Action::Push(a) => apply_push(state, a, material, tool, seed),
        Action::Pinch(a) => apply_pinch(state, a, material, tool, seed),
    }
}

/// Max-accumulates swept-stamp excavation targets along a linear path with
/// linearly ramping penetration.
fn sweep_excavate(
    state: &HeightField,
    exc: &mut [f64],
    tool: &ToolProfile,
    p0: (f64, f64),
    p1: (f64, f64),
    theta: f64,
    depth_mm: f64,
) {
    let cell = state.cell_size();
    let length = ((p1.0 - p0.0).powi(2) + (p1.1 - p0.1).powi(2)).sqrt();
    let n_steps = ((length / (0.5 * cell)).ceil() as usize).max(1) + 1;
    let d0 = state.sample(p0.0 / cell - 0.5, p0.1 / cell - 0.5);
    let d1 = state.sample(p1.0 / cell - 0.5, p1.1 / cell - 0.5);
    for i in 0..n_steps {
        let s = if n_steps == 1 {
            1.0
        } else {
            i as f64 / (n_steps - 1) as f64
        };
        let pos = (p0.0 + (p1.0 - p0.0) * s, p0.1 + (p1.1 - p0.1) * s);
        let tip = d0 + (d1 - d0) * s + depth_mm * s;
        stamp_excavate(state, exc, &tool.stamp, pos, theta, tip);
    }
}

/// One stamp application: `exc[i]` collects the deepest tool-bottom
/// overshoot below the current surface seen so far (always >= 0).
fn stamp_excavate(
    state: &HeightField,
    exc: &mut [f64],
    stamp: &Stamp,
    pos_mm: (f64, f64),
    theta: f64,
    tip_depth: f64,
) {
    let cell = state.cell_size();
    let (w, h) = (state.width(), state.height());
    let reach = (stamp.side as f64 * 0.5) * stamp.cell_mm;
    let c_min = (((pos_mm.0 - reach) / cell - 0.5).floor().max(0.0)) as usize;
    let c_max = (((pos_mm.0 + reach) / cell - 0.5).ceil() as usize).min(w.saturating_sub(1));
    let r_min = (((pos_mm.1 - reach) / cell - 0.5).floor().max(0.0)) as usize;
    let r_max = (((pos_mm.1 + reach) / cell - 0.5).ceil() as usize).min(h.saturating_sub(1));
    let (sin_t, cos_t) = theta.sin_cos();
    let d_max = state.d_max();
    for r in r_min..=r_max {
        for c in c_min..=c_max {
            let px = (c as f64 + 0.5) * cell - pos_mm.0;
            let py = (r as f64 + 0.5) * cell - pos_mm.1;
            // rotate into tool frame: u along travel, v lateral
            let u = px * cos_t + py * sin_t;
            let v = -px * sin_t + py * cos_t;
            let dz = stamp.sample(u, v);
            if dz >= STAMP_SKY_MM {
                continue;
            }
            // the table is rigid: the tool cannot excavate past d_max
            let bottom = (tip_depth - dz).min(d_max);
            let i = r * w + c;
            let cur = state.depths()[i];
            if bottom > cur {
                exc[i] = exc[i].max(bottom - cur);
            }
        }
    }
}

/// Applies rebound + excavation, then deposits the plastic fraction of the
/// displaced volume as a Gaussian ridge along the path borders.
fn finish_deformation(
    out: &mut HeightField,
    exc: &mut [f64],
    material: &MaterialSpec,
    segments: &[((f64, f64), (f64, f64))],
    tool_radius_mm: f64,
) {
    let rb = 1.0 - material.elastic_rebound;
    let cell = out.cell_size();
    let cell_area = cell * cell;
    let mut displaced = 0.0;
    for e in exc.iter_mut() {
        *e *= rb;
        displaced += *e;
    }
    displaced *= cell_area;
    for (d, e) in out.depths_mut().iter_mut().zip(exc.iter()) {
        *d += e;
    }

    if displaced <= 0.0 || material.plasticity <= 0.0 || material.ridge_sigma_mm <= 0.0 {
        return;
    }
    let sigma = material.ridge_sigma_mm;
    let cutoff = 4.0 * sigma;
    let (w, h) = (out.width(), out.height());
    let mut weights = vec![0.0; w * h];
    let mut total_w = 0.0;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if exc[i] > 0.0 {
                continue; // ridge forms on the borders, not in the groove
            }
            let p = ((c as f64 + 0.5) * cell, (r as f64 + 0.5) * cell);
            let mut d_path = f64::INFINITY;
            for (a, b) in segments {
                d_path = d_path.min(dist_to_segment(p, *a, *b));
            }
            let d = (d_path - tool_radius_mm).max(0.0);
            if d < cutoff {
                let wgt = (-0.5 * (d / sigma).powi(2)).exp();
                weights[i] = wgt;
                total_w += wgt;
            }
        }
    }
    if total_w <= 0.0 {
        return;
    }
    let scale = material.plasticity * displaced / (total_w * cell_area);
    let depths = out.depths_mut();
    for i in 0..depths.len() {
        if weights[i] > 0.0 {
            depths[i] = (depths[i] - weights[i] * scale).max(0.0);
        }
    }
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

/// Repose relaxation (granular materials), then one seeded scan-noise pass.
fn relax_and_scan(out: &mut HeightField, material: &MaterialSpec, seed: u64) {
    if let Some(tan) = material.repose_tangent {
        relax_repose(out, tan);
    }
    if material.noise_sigma_mm > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, material.noise_sigma_mm).expect("valid sigma");
        let d_max = out.d_max();
        for d in out.depths_mut() {
            *d = (*d + normal.sample(&mut rng)).clamp(0.0, d_max + 0.9 * EPS_TABLE_MM);
        }
    }
}

/// Moves material downhill until no adjacent-cell slope exceeds the repose
/// tangent. Relaxes against a slightly tightened threshold so the bound
/// still holds after f32 storage quantisation.
fn relax_repose(out: &mut HeightField, tan: f64) {
    let (w, h) = (out.width(), out.height());
    let cell = out.cell_size();
    let limit = (tan - 2.0e-5) * cell;
    let tol = 1.0e-8 * cell;
    let max_sweeps = 4000;
    let depths = out.depths_mut();
    for _ in 0..max_sweeps {
        let mut dirty = false;
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                // right and down neighbours; each pair visited once
                if c + 1 < w {
                    let j = i + 1;
                    let diff = depths[i] - depths[j];
                    if diff.abs() > limit + tol {
                        let t = 0.5 * (diff.abs() - limit);
                        // material flows from the higher (smaller-depth) cell
                        if diff > 0.0 {
                            depths[i] -= t;
                            depths[j] += t;
                        } else {
                            depths[i] += t;
                            depths[j] -= t;
                        }
                        dirty = true;
                    }
                }
                if r + 1 < h {
                    let j = i + w;
                    let diff = depths[i] - depths[j];
                    if diff.abs() > limit + tol {
                        let t = 0.5 * (diff.abs() - limit);
                        if diff > 0.0 {
                            depths[i] -= t;
                            depths[j] += t;
                        } else {
                            depths[i] += t;
                            depths[j] -= t;
                        }
                        dirty = true;
                    }
                }
            }
        }
        if !dirty {
            break;
        }
    }
}

/// Largest adjacent-cell slope magnitude in the field.
pub fn max_adjacent_slope(field: &HeightField) -> f64 {
    let (w, h) = (field.width(), field.height());
    let inv = 1.0 / field.cell_size();
    let d = field.depths();
    let mut max_slope: f64 = 0.0;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                max_slope = max_slope.max((d[i] - d[i + 1]).abs() * inv);
            }
            if r + 1 < h {
                max_slope = max_slope.max((d[i] - d[i + w]).abs() * inv);
            }
        }
    }
    max_slope
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ActionBounds;

    fn slab(w: usize, h: usize) -> HeightField {
        // 40mm of material under an 80mm table plane, 2mm cells
        HeightField::flat(w, h, 2.0, 80.0, 40.0).unwrap()
    }

    fn push(x: f64, y: f64, theta: f64, l: f64, z: f64) -> PushAction {
        PushAction {
            x,
            y,
            theta,
            length_mm: l,
            depth_mm: z,
        }
    }

    fn rod() -> ToolProfile {
        ToolProfile::rod(8.0, 0.2, ToolMode::SingleTip).unwrap()
    }

    #[test]
    fn zero_depth_is_noise_only() {
        let s = slab(64, 64);
        let mut m = MaterialSpec::foam();
        m.noise_sigma_mm = 0.0;
        let out = apply_push(&s, &push(0.5, 0.5, 0.3, 30.0, 0.0), &m, &rod(), 7).unwrap();
        assert_eq!(out.depths(), s.depths());
    }

    #[test]
    fn determinism_same_seed_same_output() {
        let s = slab(64, 64);
        let m = MaterialSpec::foam();
        let a = push(0.4, 0.6, 1.2, 25.0, 6.0);
        let o1 = apply_push(&s, &a, &m, &rod(), 99).unwrap();
        let o2 = apply_push(&s, &a, &m, &rod(), 99).unwrap();
        assert_eq!(o1.depths(), o2.depths());
        let o3 = apply_push(&s, &a, &m, &rod(), 100).unwrap();
        assert_ne!(o1.depths(), o3.depths());
    }

    #[test]
    fn volume_conserved_at_full_plasticity() {
        let s = slab(96, 96);
        let m = MaterialSpec {
            name: "ideal".into(),
            plasticity: 1.0,
            ridge_sigma_mm: 4.0,
            repose_tangent: None,
            elastic_rebound: 0.0,
            noise_sigma_mm: 0.0,
        };
        for (i, a) in [
            push(0.5, 0.5, 0.0, 40.0, 8.0),
            push(0.3, 0.6, 2.1, 20.0, 4.0),
            push(0.6, 0.4, 4.5, 55.0, 11.0),
        ]
        .iter()
        .enumerate()
        {
            let out = apply_push(&s, a, &m, &rod(), i as u64).unwrap();
            let v0 = s.material_volume();
            let v1 = out.material_volume();
            // displaced volume for the tolerance denominator
            let cell2 = s.cell_size() * s.cell_size();
            let displaced: f64 = out
                .depths()
                .iter()
                .zip(s.depths())
                .map(|(o, i)| (o - i).max(0.0))
                .sum::<f64>()
                * cell2;
            assert!(displaced > 0.0);
            assert!(
                (v1 - v0).abs() <= 0.01 * displaced,
                "volume drift {} vs displaced {displaced}",
                v1 - v0
            );
        }
    }

    #[test]
    fn monotone_excavation_along_path() {
        let s = slab(64, 64);
        let mut m = MaterialSpec::foam();
        m.noise_sigma_mm = 0.0;
        m.plasticity = 0.0; // isolate excavation
        let a = push(0.35, 0.5, 0.0, 40.0, 7.0);
        let out = apply_push(&s, &a, &m, &rod(), 0).unwrap();
        for (o, i) in out.depths().iter().zip(s.depths()) {
            assert!(o >= i, "tool added material under itself");
        }
    }

    #[test]
    fn locality_outside_reach() {
        let s = slab(96, 96);
        let mut m = MaterialSpec::foam();
        m.noise_sigma_mm = 0.0;
        let a = push(0.5, 0.5, 0.9, 30.0, 8.0);
        let out = apply_push(&s, &a, &m, &rod(), 3).unwrap();
        let cell = s.cell_size();
        let (w_mm, h_mm) = s.extent_mm();
        let p0 = (a.x * w_mm, a.y * h_mm);
        let p1 = (
            p0.0 + a.theta.cos() * a.length_mm,
            p0.1 + a.theta.sin() * a.length_mm,
        );
        let reach = rod().contact_radius_mm() + 4.0 * m.ridge_sigma_mm;
        for r in 0..96 {
            for c in 0..96 {
                let p = ((c as f64 + 0.5) * cell, (r as f64 + 0.5) * cell);
                if dist_to_segment(p, p0, p1) > reach + cell {
                    let i = r * 96 + c;
                    assert_eq!(out.depths()[i], s.depths()[i], "cell ({c},{r}) changed");
                }
            }
        }
    }

    #[test]
    fn sand_relaxation_bounds_slopes() {
        // steep spike, zero-length zero-depth action: relaxation alone fixes it
        let mut s = slab(48, 48);
        let mid = 24 * 48 + 24;
        s.depths_mut()[mid] = 5.0;
        s.depths_mut()[mid + 1] = 70.0;
        let m = MaterialSpec::sand();
        let a = push(0.5, 0.5, 0.0, 0.0, 0.0);
        let out = apply_push(&s, &a, &m, &rod(), 1).unwrap();
        let tan = m.repose_tangent.unwrap();
        assert!(max_adjacent_slope(&out) <= tan + 1e-6);
        // volume preserved by relaxation
        assert!((out.material_volume() - s.material_volume()).abs() < 1e-6);
    }

    #[test]
    fn sand_relaxation_survives_f32_round_trip() {
        let mut s = slab(32, 32);
        for (i, d) in s.depths_mut().iter_mut().enumerate() {
            *d += ((i % 32) as f64 * 0.37).sin() * 20.0;
        }
        let s = HeightField::new(32, 32, 2.0, 80.0, s.depths().to_vec()).unwrap();
        let m = MaterialSpec::sand();
        let out = apply_push(&s, &push(0.5, 0.5, 1.0, 20.0, 6.0), &m, &rod(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sand.hfd");
        crate::field::write_hfd(&out, &path).unwrap();
        let back = crate::field::read_hfd(&path, true).unwrap();
        assert!(max_adjacent_slope(&back) <= m.repose_tangent.unwrap() + 1e-6);
    }

    #[test]
    fn pinch_requires_gripper_and_push_rejects_it() {
        let s = slab(48, 48);
        let m = MaterialSpec::foam();
        let gripper = ToolProfile::rod(6.0, 0.1, ToolMode::GripperPair).unwrap();
        let pa = PinchAction {
            x: 0.5,
            y: 0.5,
            theta: 0.0,
            close_dist_mm: 20.0,
            depth_mm: 6.0,
        };
        assert!(apply_pinch(&s, &pa, &m, &rod(), 0).is_err());
        assert!(apply_pinch(&s, &pa, &m, &gripper, 0).is_ok());
        let push_a = push(0.5, 0.5, 0.0, 20.0, 5.0);
        assert!(apply_push(&s, &push_a, &m, &gripper, 0).is_err());
    }

    #[test]
    fn pinch_zero_everything_is_noise_only() {
        let s = slab(48, 48);
        let mut m = MaterialSpec::foam();
        m.noise_sigma_mm = 0.0;
        let gripper = ToolProfile::rod(6.0, 0.1, ToolMode::GripperPair).unwrap();
        let pa = PinchAction {
            x: 0.5,
            y: 0.5,
            theta: 1.0,
            close_dist_mm: 0.0,
            depth_mm: 0.0,
        };
        let out = apply_pinch(&s, &pa, &m, &gripper, 4).unwrap();
        assert_eq!(out.depths(), s.depths());
    }

    #[test]
    fn pinch_determinism() {
        let s = slab(64, 64);
        let m = MaterialSpec::foam();
        let gripper = ToolProfile::rod(6.0, 0.1, ToolMode::GripperPair).unwrap();
        let pa = PinchAction {
            x: 0.5,
            y: 0.5,
            theta: 0.7,
            close_dist_mm: 25.0,
            depth_mm: 7.0,
        };
        let o1 = apply_pinch(&s, &pa, &m, &gripper, 11).unwrap();
        let o2 = apply_pinch(&s, &pa, &m, &gripper, 11).unwrap();
        assert_eq!(o1.depths(), o2.depths());
    }

    #[test]
    fn pinch_rougher_than_push_at_matched_volume() {
        let s = slab(96, 96);
        let mut m = MaterialSpec::foam();
        m.noise_sigma_mm = 0.0;
        let gripper = ToolProfile::rod(6.0, 0.1, ToolMode::GripperPair).unwrap();
        let tool = ToolProfile::rod(6.0, 0.1, ToolMode::SingleTip).unwrap();
        let pa = PinchAction {
            x: 0.5,
            y: 0.5,
            theta: 0.0,
            close_dist_mm: 24.0,
            depth_mm: 8.0,
        };
        let pinch_out = apply_pinch(&s, &pa, &m, &gripper, 21).unwrap();
        let pinch_vol: f64 = pinch_out
            .depths()
            .iter()
            .zip(s.depths())
            .map(|(o, i)| (o - i).max(0.0))
            .sum();
        // find a push with comparable displaced volume by scanning depth
        let mut best: Option<(f64, HeightField)> = None;
        for z in [3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0] {
            let out = apply_push(&s, &push(0.45, 0.5, 0.0, 24.0, z), &m, &tool, 21).unwrap();
            let vol: f64 = out
                .depths()
                .iter()
                .zip(s.depths())
                .map(|(o, i)| (o - i).max(0.0))
                .sum();
            let err = (vol - pinch_vol).abs();
            if best.as_ref().map_or(true, |(e, _)| err < *e) {
                best = Some((err, out));
            }
        }
        let (_, push_out) = best.unwrap();
        let energy = |f: &HeightField| {
            let delta: Vec<f64> = f
                .depths()
                .iter()
                .zip(s.depths())
                .map(|(o, i)| o - i)
                .collect();
            let df = HeightField::from_raw(96, 96, 2.0, 80.0, delta).unwrap();
            df.spatial_gradient().mean_squared()
        };
        assert!(
            energy(&pinch_out) > energy(&push_out),
            "pinch {} <= push {}",
            energy(&pinch_out),
            energy(&push_out)
        );
    }

    #[test]
    fn out_of_bounds_actions_rejected() {
        let s = slab(32, 32);
        let m = MaterialSpec::foam();
        let a = push(1.5, 0.5, 0.0, 10.0, 2.0);
        assert!(apply_push(&s, &a, &m, &rod(), 0).is_err());
        let b = PushAction {
            theta: -0.1,
            ..push(0.5, 0.5, 0.0, 10.0, 2.0)
        };
        assert!(apply_push(&s, &b, &m, &rod(), 0).is_err());
        // validate() against configured bounds
        let bounds = ActionBounds::default();
        assert!(push(0.5, 0.5, 0.0, 10.0, 2.0).validate(&bounds).is_ok());
    }
}
