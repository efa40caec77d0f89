//! Push/pinch action parameterisation and the rigid pose each action induces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::HeightField;

/// Linear tool sweep: start `(x, y)` in normalized workspace coordinates,
/// direction `theta` (radians, `[0, 2pi)`), travel `length_mm` and terminal
/// penetration `depth_mm` below the local surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PushAction {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub length_mm: f64,
    pub depth_mm: f64,
}

/// Gripper variant: the jaws close by `close_dist_mm` along `theta` instead
/// of travelling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinchAction {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub close_dist_mm: f64,
    pub depth_mm: f64,
}

/// Configured maxima for the shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub l_max_mm: f64,
    pub z_max_mm: f64,
    pub c_max_mm: f64,
}

impl Default for ActionBounds {
    fn default() -> Self {
        Self {
            l_max_mm: 60.0,
            z_max_mm: 12.0,
            c_max_mm: 40.0,
        }
    }
}

impl ActionBounds {
    pub fn validate(&self) -> Result<()> {
        if self.l_max_mm < 0.0 || self.z_max_mm < 0.0 || self.c_max_mm < 0.0 {
            return Err(Error::InvalidConfig("action bounds must be >= 0".into()));
        }
        Ok(())
    }
}

const TAU: f64 = std::f64::consts::TAU;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Push,
    Pinch,
}

/// Either action variant; planner and dataset code are generic over the kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Push(PushAction),
    Pinch(PinchAction),
}

impl PushAction {
    pub fn validate(&self, bounds: &ActionBounds) -> Result<()> {
        validate_common(self.x, self.y, self.theta)?;
        check_range("length_mm", self.length_mm, bounds.l_max_mm)?;
        check_range("depth_mm", self.depth_mm, bounds.z_max_mm)?;
        Ok(())
    }
}

impl PinchAction {
    pub fn validate(&self, bounds: &ActionBounds) -> Result<()> {
        validate_common(self.x, self.y, self.theta)?;
        check_range("close_dist_mm", self.close_dist_mm, bounds.c_max_mm)?;
        check_range("depth_mm", self.depth_mm, bounds.z_max_mm)?;
        Ok(())
    }
}

fn validate_common(x: f64, y: f64, theta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(Error::InvalidAction(format!(
            "start ({x}, {y}) outside [0,1]^2"
        )));
    }
    if !(0.0..TAU).contains(&theta) {
        return Err(Error::InvalidAction(format!(
            "theta {theta} outside [0, 2pi)"
        )));
    }
    Ok(())
}

fn check_range(name: &str, v: f64, max: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 || v > max {
        return Err(Error::InvalidAction(format!(
            "{name} = {v} outside [0, {max}]"
        )));
    }
    Ok(())
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Push(_) => ActionKind::Push,
            Action::Pinch(_) => ActionKind::Pinch,
        }
    }

    pub fn x(&self) -> f64 {
        match self {
            Action::Push(a) => a.x,
            Action::Pinch(a) => a.x,
        }
    }

    pub fn y(&self) -> f64 {
        match self {
            Action::Push(a) => a.y,
            Action::Pinch(a) => a.y,
        }
    }

    pub fn theta(&self) -> f64 {
        match self {
            Action::Push(a) => a.theta,
            Action::Pinch(a) => a.theta,
        }
    }

    /// First shape parameter in mm: travel length for pushes, close distance
    /// for pinches.
    pub fn extent_mm(&self) -> f64 {
        match self {
            Action::Push(a) => a.length_mm,
            Action::Pinch(a) => a.close_dist_mm,
        }
    }

    pub fn depth_mm(&self) -> f64 {
        match self {
            Action::Push(a) => a.depth_mm,
            Action::Pinch(a) => a.depth_mm,
        }
    }

    pub fn validate(&self, bounds: &ActionBounds) -> Result<()> {
        match self {
            Action::Push(a) => a.validate(bounds),
            Action::Pinch(a) => a.validate(bounds),
        }
    }

    /// Shape parameters normalized to [0,1] by their configured maxima, in
    /// the order the dynamics model consumes them.
    pub fn shape_params_normalized(&self, bounds: &ActionBounds) -> [f64; 2] {
        match self {
            Action::Push(a) => [
                norm(a.length_mm, bounds.l_max_mm),
                norm(a.depth_mm, bounds.z_max_mm),
            ],
            Action::Pinch(a) => [
                norm(a.close_dist_mm, bounds.c_max_mm),
                norm(a.depth_mm, bounds.z_max_mm),
            ],
        }
    }

    /// The rigid pose of the action on a given field: start point in
    /// continuous cell coordinates plus direction.
    pub fn pose(&self, field: &HeightField) -> Pose {
        Pose::from_normalized(self.x(), self.y(), self.theta(), field)
    }

    /// Five normalized parameters `(x, y, theta/2pi, extent/max, depth/z_max)`
    /// as used by the planner's optimizer and the noise sweeps.
    pub fn to_normalized(&self, bounds: &ActionBounds) -> [f64; 5] {
        let [s0, s1] = self.shape_params_normalized(bounds);
        [self.x(), self.y(), self.theta() / TAU, s0, s1]
    }

    /// Inverse of [`Action::to_normalized`]; clamps every component into
    /// bounds so optimizer iterates always map to valid actions.
    pub fn from_normalized(kind: ActionKind, p: &[f64; 5], bounds: &ActionBounds) -> Action {
        let x = p[0].clamp(0.0, 1.0);
        let y = p[1].clamp(0.0, 1.0);
        // theta wraps rather than clamps
        let theta = (p[2].rem_euclid(1.0)) * TAU;
        let theta = if theta >= TAU { 0.0 } else { theta };
        let depth_mm = p[4].clamp(0.0, 1.0) * bounds.z_max_mm;
        match kind {
            ActionKind::Push => Action::Push(PushAction {
                x,
                y,
                theta,
                length_mm: p[3].clamp(0.0, 1.0) * bounds.l_max_mm,
                depth_mm,
            }),
            ActionKind::Pinch => Action::Pinch(PinchAction {
                x,
                y,
                theta,
                close_dist_mm: p[3].clamp(0.0, 1.0) * bounds.c_max_mm,
                depth_mm,
            }),
        }
    }
}

fn norm(v: f64, max: f64) -> f64 {
    if max > 0.0 {
        v / max
    } else {
        0.0
    }
}

/// Rigid pose of an action on a specific grid: start point in continuous
/// cell coordinates and direction angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub start_x: f64,
    pub start_y: f64,
    pub theta: f64,
}

impl Pose {
    /// Maps normalized workspace coordinates onto continuous cell
    /// coordinates (cell centres at integers; `x = 0` maps to the left edge
    /// of the first column).
    pub fn from_normalized(x: f64, y: f64, theta: f64, field: &HeightField) -> Pose {
        Pose {
            start_x: x * field.width() as f64 - 0.5,
            start_y: y * field.height() as f64 - 0.5,
            theta,
        }
    }
}
