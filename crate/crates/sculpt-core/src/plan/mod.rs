//! Planning: goal preprocessing, the combined 3D+visual objective over
//! model rollouts, greedy initialization, gradient/CEM refinement and the
//! execute-replan MPC loop.

mod goal;
mod mpc;
mod objective;
mod search;
pub mod synth;

pub use goal::{adjust_goal, edge_mask, goal_objective, GoalSpec, GoalWeights};
pub use mpc::{mpc_sculpt, ExecutionLog, MpcConfig, OracleWorld, StepRecord, World};
pub use objective::{build_rollout, plan_objective, rollout_final_state, PlanObjective, Rollout};
pub use search::{greedy_init, refine, Plan, RefineConfig, RefineMethod};
