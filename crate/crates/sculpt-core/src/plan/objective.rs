//! The combined 3D + visual planning objective over model rollouts.

use crate::error::{Error, Result};
use crate::field::{Action, ActionBounds, ActionKind, HeightField};
use crate::nn::{DynamicsModel, Graph, NodeId, Tensor};

#[derive(Debug, Clone)]
pub struct PlanObjective {
    pub target: HeightField,
    pub w_3d: f64,
    pub w_viz: f64,
}

impl PlanObjective {
    pub fn new(target: HeightField, w_3d: f64, w_viz: f64) -> Result<Self> {
        if w_3d < 0.0 || w_viz < 0.0 || w_3d + w_viz <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "objective weights ({w_3d}, {w_viz}) must be nonnegative and not both zero"
            )));
        }
        Ok(Self {
            target,
            w_3d,
            w_viz,
        })
    }

    /// Direct (non-graph) evaluation against a state.
    pub fn eval_state(&self, state: &HeightField) -> Result<f64> {
        let l3d = crate::nn::loss_3d(state, &self.target)?;
        let lviz = crate::nn::loss_viz(state, &self.target)?;
        Ok(self.w_3d * l3d + self.w_viz * lviz)
    }
}

/// A rollout graph with handles to the per-action leaves, so the refiner
/// can read gradients per action parameter.
pub struct Rollout {
    pub graph: Graph,
    pub action_ids: Vec<NodeId>,
    pub final_state: NodeId,
    pub loss: NodeId,
}

/// Builds the differentiable rollout: the model steps through every action
/// from `start` and the weighted loss compares the final state with the
/// target. Action leaves are the 5 normalized parameters
/// `(x, y, theta/2pi, extent/max, depth/z_max)`.
pub fn build_rollout(
    model: &DynamicsModel,
    start: &HeightField,
    actions01: &[[f64; 5]],
    kind: ActionKind,
    objective: &PlanObjective,
) -> Result<Rollout> {
    model.check_geometry(start)?;
    if !start.same_geometry(&objective.target) {
        return Err(Error::ShapeMismatch {
            expected: "start and target with identical geometry".into(),
            got: "differing grids".into(),
        });
    }
    let d_max = start.d_max();
    let (h, w) = (start.height(), start.width());
    let mut g = Graph::new();
    let bound = model.bind(&mut g);

    let state01: Vec<f64> = start.depths().iter().map(|v| v / d_max).collect();
    let mut state = g.input(Tensor::new(vec![h, w], state01)?);
    let mut action_ids = Vec::with_capacity(actions01.len());
    let tau = std::f64::consts::TAU;
    for a in actions01 {
        let leaf = g.input(Tensor::new(vec![5], a.to_vec())?);
        action_ids.push(leaf);
        let pose = g.affine_select(
            leaf,
            vec![0, 1, 2],
            vec![w as f64, h as f64, tau],
            vec![-0.5, -0.5, 0.0],
        );
        let shape01 = g.affine_select(leaf, vec![3, 4], vec![1.0, 1.0], vec![0.0, 0.0]);
        state = model.build_step(&mut g, &bound, state, pose, shape01, kind);
    }

    let target01: Vec<f64> = objective.target.depths().iter().map(|v| v / d_max).collect();
    let target = g.input(Tensor::new(vec![h, w], target01)?);
    let l3d = g.mse(state, target);
    let slope_factor = d_max / start.cell_size();
    let gp = g.grad2d(state, slope_factor);
    let gt = g.grad2d(target, slope_factor);
    let lviz = g.mse(gp, gt);
    let loss = g.weighted_sum(&[l3d, lviz], &[objective.w_3d, objective.w_viz]);
    Ok(Rollout {
        graph: g,
        action_ids,
        final_state: state,
        loss,
    })
}

/// Scalar planning objective of an action sequence (differentiable route;
/// this is the forward value of [`build_rollout`]).
pub fn plan_objective(
    actions: &[Action],
    start: &HeightField,
    objective: &PlanObjective,
    model: &DynamicsModel,
    bounds: &ActionBounds,
) -> Result<f64> {
    for a in actions {
        a.validate(bounds)?;
    }
    let kind = actions
        .first()
        .map(|a| a.kind())
        .unwrap_or(ActionKind::Push);
    let actions01: Vec<[f64; 5]> = actions.iter().map(|a| a.to_normalized(bounds)).collect();
    let rollout = build_rollout(model, start, &actions01, kind, objective)?;
    let v = rollout.graph.value(rollout.loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("plan objective".into()));
    }
    Ok(v)
}

/// Materializes the rollout's final state as a heightfield.
pub fn rollout_final_state(rollout: &Rollout, reference: &HeightField) -> Result<HeightField> {
    let d_max = reference.d_max();
    let depths: Vec<f64> = rollout
        .graph
        .value(rollout.final_state)
        .data()
        .iter()
        .map(|v| v * d_max)
        .collect();
    HeightField::from_raw(
        reference.width(),
        reference.height(),
        reference.cell_size(),
        d_max,
        depths,
    )
}
