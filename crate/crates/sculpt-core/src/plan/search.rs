//! Plan construction: greedy one-by-one initialization followed by joint
//! refinement (gradient-based or cross-entropy).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Action, ActionBounds, ActionKind, HeightField};
use crate::nn::DynamicsModel;
use crate::plan::objective::{build_rollout, PlanObjective};

/// Ordered action list plus the execution schedule it was built for.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Plan {
    pub actions: Vec<Action>,
    pub w_3d: f64,
    pub w_viz: f64,
    /// Actions executed between replans.
    pub exec_chunk: usize,
    pub seed: u64,
}

impl Plan {
    pub fn validate(&self, bounds: &ActionBounds) -> Result<()> {
        if self.actions.is_empty() {
            return Err(Error::InvalidConfig("plan must hold >= 1 action".into()));
        }
        for a in &self.actions {
            a.validate(bounds)?;
        }
        Ok(())
    }
}

/// Depth floor for sampled candidates, as a fraction of z_max: greedy never
/// proposes a no-op.
const CANDIDATE_Z_FLOOR: f64 = 0.05;

fn sample_candidate(rng: &mut ChaCha8Rng, kind: ActionKind, bounds: &ActionBounds) -> Action {
    let p = [
        rng.gen_range(0.0..=1.0),
        rng.gen_range(0.0..=1.0),
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.0..=1.0),
        rng.gen_range(CANDIDATE_Z_FLOOR..=1.0),
    ];
    Action::from_normalized(kind, &p, bounds)
}

/// Greedy initialization: for each slot, samples `trials` uniform candidate
/// actions, appends the one that minimizes the objective (ties broken by
/// lowest candidate index) and advances the predicted state.
pub fn greedy_init(
    n_actions: usize,
    start: &HeightField,
    objective: &PlanObjective,
    model: &DynamicsModel,
    bounds: &ActionBounds,
    kind: ActionKind,
    trials: usize,
    seed: u64,
) -> Result<Plan> {
    if n_actions == 0 || trials == 0 {
        return Err(Error::InvalidConfig(
            "greedy_init needs n_actions >= 1 and trials >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = start.clone();
    let mut actions = Vec::with_capacity(n_actions);
    for _ in 0..n_actions {
        let mut best: Option<(f64, Action, HeightField)> = None;
        for _ in 0..trials {
            let cand = sample_candidate(&mut rng, kind, bounds);
            let next = model.predict(&state, &cand, bounds)?;
            let obj = objective.eval_state(&next)?;
            if !obj.is_finite() {
                return Err(Error::NonFinite("greedy candidate objective".into()));
            }
            // strict less-than keeps the lowest-index winner on ties
            if best.as_ref().map_or(true, |(b, _, _)| obj < *b) {
                best = Some((obj, cand, next));
            }
        }
        let (_, chosen, next) = best.expect("trials >= 1");
        actions.push(chosen);
        state = next;
    }
    Ok(Plan {
        actions,
        w_3d: objective.w_3d,
        w_viz: objective.w_viz,
        exec_chunk: 1,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMethod {
    Gd,
    Cem,
}

impl std::str::FromStr for RefineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(RefineMethod::Gd),
            "cem" => Ok(RefineMethod::Cem),
            other => Err(Error::InvalidConfig(format!(
                "unknown refiner '{other}' (expected gd or cem)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub method: RefineMethod,
    pub iters: usize,
    /// Adam step size on normalized action parameters (gd).
    pub gd_lr: f64,
    pub cem_population: usize,
    pub cem_elite_frac: f64,
    /// Initial sampling spread in normalized units (cem).
    pub cem_sigma: f64,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            method: RefineMethod::Gd,
            iters: 100,
            gd_lr: 0.02,
            cem_population: 32,
            cem_elite_frac: 0.25,
            cem_sigma: 0.1,
            seed: 0,
        }
    }
}

/// Refines all action parameters jointly; returns the best plan seen and
/// its objective, never worse than the input plan.
pub fn refine(
    plan: &Plan,
    start: &HeightField,
    objective: &PlanObjective,
    model: &DynamicsModel,
    bounds: &ActionBounds,
    config: &RefineConfig,
) -> Result<(Plan, f64)> {
    plan.validate(bounds)?;
    let kind = plan.actions[0].kind();
    let params: Vec<[f64; 5]> = plan
        .actions
        .iter()
        .map(|a| a.to_normalized(bounds))
        .collect();

    let eval = |p: &[[f64; 5]]| -> Result<f64> {
        let rollout = build_rollout(model, start, p, kind, objective)?;
        let v = rollout.graph.value(rollout.loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("refinement objective".into()));
        }
        Ok(v)
    };

    let initial_obj = eval(&params)?;
    let mut best = (initial_obj, params.clone());

    match config.method {
        RefineMethod::Gd => {
            let n = params.len();
            let mut p = params;
            let mut m = vec![[0.0; 5]; n];
            let mut v = vec![[0.0; 5]; n];
            let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
            for it in 0..config.iters {
                let rollout = build_rollout(model, start, &p, kind, objective)?;
                let obj = rollout.graph.value(rollout.loss).item();
                if !obj.is_finite() {
                    return Err(Error::NonFinite(format!("gd objective at iter {it}")));
                }
                if obj < best.0 {
                    best = (obj, p.clone());
                }
                let grads = rollout.graph.backward(rollout.loss);
                let t = (it + 1) as i32;
                let bc1 = 1.0 - b1.powi(t);
                let bc2 = 1.0 - b2.powi(t);
                for (ai, &id) in rollout.action_ids.iter().enumerate() {
                    let Some(g) = grads.get(id) else { continue };
                    for j in 0..5 {
                        let gv = g.data()[j];
                        m[ai][j] = b1 * m[ai][j] + (1.0 - b1) * gv;
                        v[ai][j] = b2 * v[ai][j] + (1.0 - b2) * gv * gv;
                        let step =
                            config.gd_lr * (m[ai][j] / bc1) / ((v[ai][j] / bc2).sqrt() + eps);
                        p[ai][j] -= step;
                    }
                    project(&mut p[ai]);
                }
            }
            let final_obj = eval(&p)?;
            if final_obj < best.0 {
                best = (final_obj, p);
            }
        }
        RefineMethod::Cem => {
            let n = params.len();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut mean = params;
            let mut sigma = vec![[config.cem_sigma; 5]; n];
            let pop = config.cem_population.max(2);
            let n_elite = ((pop as f64 * config.cem_elite_frac).ceil() as usize).clamp(1, pop);
            for _ in 0..config.iters {
                let mut scored: Vec<(f64, Vec<[f64; 5]>)> = Vec::with_capacity(pop);
                for _ in 0..pop {
                    let mut cand = mean.clone();
                    for ai in 0..n {
                        for j in 0..5 {
                            let z: f64 = {
                                // Box-Muller keeps the dependency surface small
                                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                                let u2: f64 = rng.gen_range(0.0..1.0);
                                (-2.0 * u1.ln()).sqrt()
                                    * (std::f64::consts::TAU * u2).cos()
                            };
                            cand[ai][j] += z * sigma[ai][j];
                        }
                        project(&mut cand[ai]);
                    }
                    let obj = eval(&cand)?;
                    scored.push((obj, cand));
                }
                scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite objectives"));
                if scored[0].0 < best.0 {
                    best = (scored[0].0, scored[0].1.clone());
                }
                // refit to the elite set
                for ai in 0..n {
                    for j in 0..5 {
                        let vals: Vec<f64> =
                            scored[..n_elite].iter().map(|(_, c)| c[ai][j]).collect();
                        let mu = vals.iter().sum::<f64>() / n_elite as f64;
                        let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>()
                            / n_elite as f64;
                        mean[ai][j] = mu;
                        sigma[ai][j] = var.sqrt().max(0.01);
                    }
                }
            }
        }
    }

    let (obj, p) = best;
    let actions: Vec<Action> = p
        .iter()
        .map(|q| Action::from_normalized(kind, q, bounds))
        .collect();
    Ok((
        Plan {
            actions,
            w_3d: plan.w_3d,
            w_viz: plan.w_viz,
            exec_chunk: plan.exec_chunk,
            seed: plan.seed,
        },
        obj,
    ))
}

/// Projects normalized parameters back into bounds: clamp everything except
/// the angle, which wraps.
fn project(p: &mut [f64; 5]) {
    p[0] = p[0].clamp(0.0, 1.0);
    p[1] = p[1].clamp(0.0, 1.0);
    p[2] = p[2].rem_euclid(1.0);
    p[3] = p[3].clamp(0.0, 1.0);
    p[4] = p[4].clamp(0.0, 1.0);
}
