//! Execute-replan MPC loop over a world executor.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{to_canonical, Action, ActionBounds, ActionKind, HeightField};
use crate::nn::{loss_3d, loss_viz, DynamicsModel};
use crate::plan::goal::GoalSpec;
use crate::plan::objective::PlanObjective;
use crate::plan::search::{greedy_init, refine, RefineConfig};
use crate::sim::{apply_action, MaterialSpec, ToolProfile};

/// Anything that can realize an action on the material and return the next
/// scan. The oracle-backed implementation stands in for the robot.
pub trait World {
    fn execute(&mut self, state: &HeightField, action: &Action) -> Result<HeightField>;
}

/// The synthetic material as the "real" world.
pub struct OracleWorld {
    pub material: MaterialSpec,
    pub tool: ToolProfile,
    rng: ChaCha8Rng,
}

impl OracleWorld {
    pub fn new(material: MaterialSpec, tool: ToolProfile, seed: u64) -> Self {
        Self {
            material,
            tool,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl World for OracleWorld {
    fn execute(&mut self, state: &HeightField, action: &Action) -> Result<HeightField> {
        apply_action(state, action, &self.material, &self.tool, self.rng.gen())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpcConfig {
    pub n_actions: usize,
    /// Actions executed between replans (k).
    pub exec_chunk: usize,
    pub w_3d: f64,
    pub w_viz: f64,
    /// Greedy candidates per slot.
    pub trials: usize,
    pub refine: RefineConfig,
    /// Re-run greedy initialization at every replan instead of refining the
    /// remaining actions only.
    pub reinit_on_replan: bool,
    pub kind: ActionKind,
    pub bounds: ActionBounds,
    pub seed: u64,
    /// Directory for per-step predicted/actual canonical patches; skipped
    /// when absent.
    pub patches_dir: Option<PathBuf>,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            n_actions: 40,
            exec_chunk: 5,
            w_3d: 1.0,
            w_viz: 1.0,
            trials: 64,
            refine: RefineConfig::default(),
            reinit_on_replan: false,
            kind: ActionKind::Push,
            bounds: ActionBounds::default(),
            seed: 0,
            patches_dir: None,
        }
    }
}

/// One executed action with losses before and after (the long-horizon loss
/// curve data).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub action: Action,
    pub pre_loss_3d: f64,
    pub pre_loss_viz: f64,
    pub post_loss_3d: f64,
    pub post_loss_viz: f64,
    pub predicted_patch_path: String,
    pub actual_patch_path: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExecutionLog {
    pub steps: Vec<StepRecord>,
    pub initial_loss_3d: f64,
    pub initial_loss_viz: f64,
    pub final_loss_3d: f64,
    pub final_loss_viz: f64,
    /// Set when world execution failed; the log is then partial.
    pub aborted: Option<String>,
}

impl ExecutionLog {
    /// Writes the spec'd JSON-lines form: one record per executed action.
    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&serde_json::to_string(step)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Plans, executes in chunks of `exec_chunk`, rescans and replans until all
/// `n_actions` are spent. Each replan starts from the true scan, so model
/// error does not accumulate beyond a chunk. Returns the log and the final
/// scan.
pub fn mpc_sculpt(
    start: &HeightField,
    goal: &GoalSpec,
    model: &DynamicsModel,
    world: &mut dyn World,
    config: &MpcConfig,
) -> Result<(ExecutionLog, HeightField)> {
    if config.n_actions == 0 || config.exec_chunk == 0 || config.exec_chunk > config.n_actions {
        return Err(Error::InvalidConfig(format!(
            "need n_actions >= exec_chunk >= 1, got {} and {}",
            config.n_actions, config.exec_chunk
        )));
    }
    let objective = PlanObjective::new(goal.adjusted.clone(), config.w_3d, config.w_viz)?;
    if let Some(dir) = &config.patches_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }

    let mut log = ExecutionLog {
        initial_loss_3d: loss_3d(start, &goal.adjusted)?,
        initial_loss_viz: loss_viz(start, &goal.adjusted)?,
        ..ExecutionLog::default()
    };

    let mut scan = start.clone();
    let mut phase = 0u64;
    let mut pending: Vec<Action> = Vec::new();
    let mut step = 0usize;

    while step < config.n_actions {
        let remaining = config.n_actions - step;
        // plan (or replan) all remaining slots from the latest scan
        let plan = if pending.is_empty() || config.reinit_on_replan {
            greedy_init(
                remaining,
                &scan,
                &objective,
                model,
                &config.bounds,
                config.kind,
                config.trials,
                config.seed.wrapping_add(phase),
            )?
        } else {
            crate::plan::search::Plan {
                actions: pending.clone(),
                w_3d: config.w_3d,
                w_viz: config.w_viz,
                exec_chunk: config.exec_chunk,
                seed: config.seed,
            }
        };
        let refine_cfg = RefineConfig {
            seed: config.refine.seed.wrapping_add(phase),
            ..config.refine.clone()
        };
        let (refined, _) = refine(&plan, &scan, &objective, model, &config.bounds, &refine_cfg)?;
        pending = refined.actions;
        phase += 1;

        let chunk = config.exec_chunk.min(pending.len());
        for action in pending.drain(..chunk) {
            let pre_3d = loss_3d(&scan, &goal.adjusted)?;
            let pre_viz = loss_viz(&scan, &goal.adjusted)?;
            let predicted = model.predict(&scan, &action, &config.bounds)?;
            let actual = match world.execute(&scan, &action) {
                Ok(next) => next,
                Err(e) => {
                    log.final_loss_3d = pre_3d;
                    log.final_loss_viz = pre_viz;
                    log.aborted = Some(e.to_string());
                    return Ok((log, scan));
                }
            };
            let (pred_path, actual_path) = match &config.patches_dir {
                Some(dir) => {
                    let side = model.config().patch_side;
                    let pred_patch = to_canonical(&predicted, &action, side);
                    let act_patch = to_canonical(&actual, &action, side);
                    let pred_name = format!("step_{step:04}_predicted.hfd");
                    let act_name = format!("step_{step:04}_actual.hfd");
                    write_patch_carrier(&pred_patch, scan.d_max(), &dir.join(&pred_name))?;
                    write_patch_carrier(&act_patch, scan.d_max(), &dir.join(&act_name))?;
                    // logged paths stay relative to the run directory so
                    // identical runs produce identical logs
                    let base = dir
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    (format!("{base}/{pred_name}"), format!("{base}/{act_name}"))
                }
                None => (String::new(), String::new()),
            };
            let post_3d = loss_3d(&actual, &goal.adjusted)?;
            let post_viz = loss_viz(&actual, &goal.adjusted)?;
            log.steps.push(StepRecord {
                step,
                action,
                pre_loss_3d: pre_3d,
                pre_loss_viz: pre_viz,
                post_loss_3d: post_3d,
                post_loss_viz: post_viz,
                predicted_patch_path: pred_path,
                actual_patch_path: actual_path,
            });
            scan = actual;
            step += 1;
        }
    }

    log.final_loss_3d = loss_3d(&scan, &goal.adjusted)?;
    log.final_loss_viz = loss_viz(&scan, &goal.adjusted)?;
    Ok((log, scan))
}

fn write_patch_carrier(
    patch: &crate::field::CanonicalPatch,
    d_max: f64,
    path: &std::path::Path,
) -> Result<()> {
    let carrier = HeightField::from_raw(
        patch.side(),
        patch.side(),
        patch.cell_size(),
        d_max,
        patch.values().to_vec(),
    )?;
    crate::field::write_hfd(&carrier, path)
}
