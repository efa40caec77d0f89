//! Goal creation: calibrating an imported target depth map against the
//! current state.
//!
//! The raw target is scaled (`alpha`) and shifted (`beta`) so the adjusted
//! goal has the same amount of material as the current state, stays above
//! the table plane, and keeps as much definition (large `alpha`) as
//! possible. The outer 10% band of the working area is hard-pinned to the
//! current state because the robot cannot work at the edges.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::HeightField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalWeights {
    /// Volume-match term, per fraction of field capacity.
    pub w0: f64,
    /// Below-table penalty.
    pub w1: f64,
    /// Definition reward (prefers large alpha).
    pub w2: f64,
}

impl Default for GoalWeights {
    fn default() -> Self {
        Self {
            w0: 1.0,
            w1: 10.0,
            w2: 0.1,
        }
    }
}

/// Result of goal adjustment.
#[derive(Debug, Clone)]
pub struct GoalSpec {
    pub raw_target: HeightField,
    /// The calibrated target the planner matches.
    pub adjusted: HeightField,
    pub alpha: f64,
    pub beta: f64,
    /// True where the adjusted target is pinned to the current state.
    pub edge_mask: Vec<bool>,
    pub weights: GoalWeights,
    /// Set when the target was too flat to identify alpha; beta then comes
    /// from a volume match at alpha = 1.
    pub degenerate: bool,
}

const ALPHA_RANGE: (f64, f64) = (0.1, 3.0);

/// Boolean mask of the outer 10% band of each dimension.
pub fn edge_mask(width: usize, height: usize) -> Vec<bool> {
    let bx = ((width as f64) * 0.1).ceil() as usize;
    let by = ((height as f64) * 0.1).ceil() as usize;
    let mut mask = vec![false; width * height];
    for r in 0..height {
        for c in 0..width {
            if c < bx || c >= width - bx || r < by || r >= height - by {
                mask[r * width + c] = true;
            }
        }
    }
    mask
}

/// Fits `(alpha, beta)` by coarse grid search plus local refinement, then
/// composes the adjusted target with hard edge equality and clamps it into
/// `[0, d_max]`.
pub fn adjust_goal(
    target: &HeightField,
    current: &HeightField,
    weights: GoalWeights,
) -> Result<GoalSpec> {
    if target.width() != current.width()
        || target.height() != current.height()
        || (target.d_max() - current.d_max()).abs() > 1e-9
    {
        return Err(Error::ShapeMismatch {
            expected: format!(
                "{}x{} d_max {}",
                current.width(),
                current.height(),
                current.d_max()
            ),
            got: format!("{}x{} d_max {}", target.width(), target.height(), target.d_max()),
        });
    }
    let (w, h) = (target.width(), target.height());
    let mask = edge_mask(w, h);
    let d_max = current.d_max();

    // statistics over the free (off-mask) region
    let mut n_free = 0usize;
    let mut sum_t = 0.0;
    let mut sum_t2 = 0.0;
    let mut sum_c = 0.0;
    for i in 0..w * h {
        if !mask[i] {
            n_free += 1;
            sum_t += target.depths()[i];
            sum_t2 += target.depths()[i] * target.depths()[i];
            sum_c += current.depths()[i];
        }
    }

    let (alpha, beta, degenerate) = if n_free == 0 {
        // the mask covers everything: the goal is the current state
        (1.0, 0.0, false)
    } else {
        let mean_t = sum_t / n_free as f64;
        let var_t = (sum_t2 / n_free as f64 - mean_t * mean_t).max(0.0);
        if var_t < 1e-9 {
            // flat target: alpha unidentifiable, match volume at alpha = 1
            let beta = (sum_c - sum_t) / n_free as f64;
            (1.0, beta, true)
        } else {
            let objective = |alpha: f64, beta: f64| {
                goal_objective(target, current, &mask, alpha, beta, &weights, d_max)
            };
            // the objective is convex piecewise-linear in beta for fixed
            // alpha, so solve beta exactly per alpha and search alpha on a
            // coarse grid with local refinement
            let best_beta = |alpha: f64| -> (f64, f64) {
                let (mut lo, mut hi) = (-d_max, d_max);
                for _ in 0..80 {
                    let m1 = lo + (hi - lo) / 3.0;
                    let m2 = hi - (hi - lo) / 3.0;
                    if objective(alpha, m1) <= objective(alpha, m2) {
                        hi = m2;
                    } else {
                        lo = m1;
                    }
                }
                let beta = 0.5 * (lo + hi);
                (objective(alpha, beta), beta)
            };
            let (a_lo, a_hi) = ALPHA_RANGE;
            let steps_a = 60;
            let mut best = (f64::INFINITY, 1.0, 0.0);
            for ia in 0..=steps_a {
                let a = a_lo + (a_hi - a_lo) * ia as f64 / steps_a as f64;
                let (j, b) = best_beta(a);
                if j < best.0 {
                    best = (j, a, b);
                }
            }
            let (mut j_best, mut a, mut b) = best;
            let mut step_a = (a_hi - a_lo) / steps_a as f64;
            for _ in 0..60 {
                let mut improved = false;
                for da in [step_a, -step_a] {
                    let na = (a + da).clamp(a_lo, a_hi);
                    let (j, nb) = best_beta(na);
                    if j < j_best {
                        j_best = j;
                        a = na;
                        b = nb;
                        improved = true;
                    }
                }
                if !improved {
                    step_a *= 0.5;
                    if step_a < 1e-7 {
                        break;
                    }
                }
            }
            (a, b, false)
        }
    };

    let mut depths = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let v = if mask[i] {
            current.depths()[i]
        } else {
            (alpha * target.depths()[i] + beta).clamp(0.0, d_max)
        };
        depths.push(v);
    }
    let adjusted = HeightField::from_raw(w, h, current.cell_size(), d_max, depths)?;
    Ok(GoalSpec {
        raw_target: target.clone(),
        adjusted,
        alpha,
        beta,
        edge_mask: mask,
        weights,
        degenerate,
    })
}

/// The fit objective on the pre-clamp composition.
pub fn goal_objective(
    target: &HeightField,
    current: &HeightField,
    mask: &[bool],
    alpha: f64,
    beta: f64,
    weights: &GoalWeights,
    d_max: f64,
) -> f64 {
    let n = target.depths().len();
    let mut sum_diff = 0.0;
    let mut overflow = 0.0;
    for i in 0..n {
        let s_hat = if mask[i] {
            current.depths()[i]
        } else {
            alpha * target.depths()[i] + beta
        };
        sum_diff += s_hat - current.depths()[i];
        overflow += (s_hat - d_max).max(0.0);
    }
    let cap = n as f64 * d_max;
    weights.w0 * sum_diff.abs() / cap + weights.w1 * overflow / cap - weights.w2 * alpha
}
