//! Deformable-surface sculpting toolkit.
//!
//! Virtual clay lives in dense heightfields; a synthetic material oracle
//! produces ground-truth deformations; a small convolutional dynamics model
//! learns to predict them in a canonical pose; and a greedy+refinement MPC
//! planner sequences push actions to match goal surfaces under combined 3D
//! and visually-aligned (spatial-gradient) objectives.

pub mod config;
pub mod error;
pub mod field;
pub mod metrics;
pub mod nn;
pub mod plan;
pub mod sim;


pub use config::{FieldConfig, PlannerConfig, RunConfig};
pub use error::{Error, Result};
pub use field::{
    Action, ActionBounds, ActionKind, CanonicalPatch, GradientField, HeightField, PinchAction,
    PushAction,
};
pub use sim::{MaterialSpec, ToolProfile, ToolSpec};
