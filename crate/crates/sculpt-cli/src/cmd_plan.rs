//! `sculpt plan`: goal adjustment, MPC sculpting against the oracle, and
//! run artifacts (logs, scans, renders).

use anyhow::{bail, Context, Result};
use sculpt_core::field::{write_hfd, ActionKind};
use sculpt_core::metrics::write_field_png;
use sculpt_core::nn::load_checkpoint;
use sculpt_core::plan::{adjust_goal, mpc_sculpt, synth, OracleWorld};

use crate::common;
use crate::PlanArgs;

pub fn run(args: PlanArgs) -> Result<()> {
    let mut config = common::load_config(args.common.config.as_deref())?.harmonized();
    if let Some(seed) = args.common.seed {
        config.seed = seed;
    }
    if let Some(n) = args.actions {
        config.planner.n_actions = n;
    }
    if let Some(k) = args.chunk {
        config.planner.exec_chunk = k;
    }
    if let Some(w) = args.w3d {
        config.planner.w_3d = w;
    }
    if let Some(w) = args.wviz {
        config.planner.w_viz = w;
    }
    if let Some(r) = &args.refiner {
        config.planner.refine_method = r.parse()?;
    }
    if let Some(t) = args.trials {
        config.planner.trials = t;
    }
    if let Some(i) = args.refine_iters {
        config.planner.refine_iters = i;
    }
    config.validate()?;
    // goal flags are validated before any filesystem work
    match (&args.goal, args.glyph) {
        (Some(_), Some(_)) => bail!(sculpt_core::Error::InvalidConfig(
            "--goal and --glyph are mutually exclusive".into()
        )),
        (None, None) => bail!(sculpt_core::Error::InvalidConfig(
            "a goal is required: --goal FILE or --glyph CHAR".into()
        )),
        _ => {}
    }

    let model = load_checkpoint(&args.model).context("loading checkpoint")?;
    let start = match &args.start {
        Some(p) => common::load_field(p, &config)?,
        None => config.initial_field()?,
    };
    let raw_goal = match (&args.goal, args.glyph) {
        (Some(path), _) => common::load_field(path, &config)?,
        (_, Some(glyph)) => synth::carve_glyph_target(&start, glyph, 8.0, 6.0)?,
        _ => unreachable!("validated above"),
    };

    let out = common::prepare_out_dir(args.common.out.as_deref(), "plan")?;
    common::snapshot_config(&out, &config)?;

    let goal = adjust_goal(&raw_goal, &start, config.planner.goal_weights)?;
    let kind = ActionKind::Push;
    let mut mpc_cfg = config.mpc_config(kind);
    mpc_cfg.patches_dir = Some(out.join("patches"));
    let tool = config.tool.build()?;
    let mut world = OracleWorld::new(config.material.clone(), tool, config.seed ^ 0x5157);

    let (log, final_scan) =
        mpc_sculpt(&start, &goal, &model, &mut world, &mpc_cfg).context("mpc run")?;

    log.write_jsonl(&out.join("log.jsonl"))?;
    write_hfd(&start, &out.join("start.hfd"))?;
    write_hfd(&raw_goal, &out.join("goal_raw.hfd"))?;
    write_hfd(&goal.adjusted, &out.join("goal_adjusted.hfd"))?;
    write_field_png(&start, &out.join("start.png"))?;
    write_field_png(&goal.adjusted, &out.join("goal_adjusted.png"))?;
    write_hfd(&final_scan, &out.join("final_scan.hfd"))?;
    write_field_png(&final_scan, &out.join("final_scan.png"))?;

    let summary = serde_json::json!({
        "alpha": goal.alpha,
        "beta": goal.beta,
        "degenerate_goal": goal.degenerate,
        "initial_loss_3d": log.initial_loss_3d,
        "initial_loss_viz": log.initial_loss_viz,
        "final_loss_3d": log.final_loss_3d,
        "final_loss_viz": log.final_loss_viz,
        "steps": log.steps.len(),
        "aborted": log.aborted,
    });
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )
    .context("writing summary")?;
    println!(
        "executed {} actions: L_3D {:.6} -> {:.6}, L_viz {:.6} -> {:.6} ({})",
        log.steps.len(),
        log.initial_loss_3d,
        log.final_loss_3d,
        log.initial_loss_viz,
        log.final_loss_viz,
        out.display()
    );
    Ok(())
}
