//! `sculpt experiments`: the reproduction harness front-ends.

use std::path::Path;

use anyhow::{bail, Context, Result};
use sculpt_core::field::{ActionKind, HeightField};
use sculpt_core::metrics::{
    cross_material_matrix, noise_sweep, sample_efficiency_sweep, write_curves_png,
    write_heatmap_png, ExperimentContext,
};
use sculpt_core::nn::load_checkpoint;
use sculpt_core::plan::{
    adjust_goal, greedy_init, mpc_sculpt, refine, synth, ExecutionLog, OracleWorld, PlanObjective,
};
use sculpt_core::sim::{MaterialSpec, ToolMode};
use sculpt_core::RunConfig;

use crate::common;
use crate::{
    CrossMaterialArgs, ExperimentsCmd, NoiseSweepArgs, PinchVsPushArgs, SampleEfficiencyArgs,
};

pub fn run(cmd: ExperimentsCmd) -> Result<()> {
    match cmd {
        ExperimentsCmd::CrossMaterial(args) => cross_material(args),
        ExperimentsCmd::SampleEfficiency(args) => sample_efficiency(args),
        ExperimentsCmd::NoiseSweep(args) => noise(args),
        ExperimentsCmd::PinchVsPush(args) => pinch_vs_push(args),
    }
}

fn context_for(config: &RunConfig, out: &Path) -> Result<ExperimentContext> {
    Ok(ExperimentContext {
        initial: config.initial_field()?,
        tool: config.tool.clone(),
        dataset: config.dataset_config(ActionKind::Push),
        model: config.model.clone(),
        train: config.train.clone(),
        seed: config.seed,
        work_dir: out.join("work"),
    })
}

fn cross_material(args: CrossMaterialArgs) -> Result<()> {
    let mut config = common::load_config(args.common.config.as_deref())?.harmonized();
    if let Some(seed) = args.common.seed {
        config.seed = seed;
        config.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    let materials: Vec<MaterialSpec> = args
        .materials
        .split(',')
        .map(|n| MaterialSpec::preset(n.trim()))
        .collect::<sculpt_core::Result<_>>()?;
    let out = common::prepare_out_dir(args.common.out.as_deref(), "cross-material")?;
    common::snapshot_config(&out, &config)?;
    let ctx = context_for(&config, &out)?;
    let result = cross_material_matrix(&ctx, &materials, args.train_samples, args.test_samples)
        .context("cross-material sweep")?;
    result.write_csv(&out.join("matrix.csv"))?;
    let n = result.materials.len();
    write_heatmap_png(&result.l_3d, n, n, 48, &out.join("matrix.png"))?;
    std::fs::write(
        out.join("result.json"),
        serde_json::to_string_pretty(&result)?,
    )?;
    for (i, mi) in result.materials.iter().enumerate() {
        let row: Vec<String> = (0..n).map(|j| format!("{:.6}", result.at(i, j))).collect();
        println!("train {mi:>6}: {}", row.join("  "));
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn sample_efficiency(args: SampleEfficiencyArgs) -> Result<()> {
    let mut config = common::load_config(args.common.config.as_deref())?.harmonized();
    if let Some(seed) = args.common.seed {
        config.seed = seed;
        config.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    if let Some(name) = &args.material {
        config.material = MaterialSpec::preset(name)?;
    }
    let sizes: Vec<usize> = args
        .sizes
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| sculpt_core::Error::InvalidConfig(format!("bad --sizes: {e}")))?;
    let out = common::prepare_out_dir(args.common.out.as_deref(), "sample-efficiency")?;
    common::snapshot_config(&out, &config)?;
    let ctx = context_for(&config, &out)?;
    let result = sample_efficiency_sweep(&ctx, &config.material, &sizes, args.test_samples)
        .context("sample-efficiency sweep")?;
    result.write_csv(&out.join("curve.csv"))?;
    let series: Vec<(f64, f64)> = result
        .sizes
        .iter()
        .zip(&result.val_l_3d)
        .map(|(&s, &l)| (s as f64, l))
        .collect();
    write_curves_png(&[&series], &out.join("curve.png"))?;
    std::fs::write(
        out.join("result.json"),
        serde_json::to_string_pretty(&result)?,
    )?;
    for (s, l) in result.sizes.iter().zip(&result.val_l_3d) {
        println!("n = {s:>5}: val L_3D {l:.6}");
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn noise(args: NoiseSweepArgs) -> Result<()> {
    let mut config = common::load_config(args.common.config.as_deref())?.harmonized();
    if let Some(seed) = args.common.seed {
        config.seed = seed;
    }
    if let Some(t) = args.greedy_trials {
        config.planner.trials = t;
    }
    if let Some(i) = args.refine_iters {
        config.planner.refine_iters = i;
    }
    let sigmas: Vec<f64> = args
        .sigmas
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| sculpt_core::Error::InvalidConfig(format!("bad --sigmas: {e}")))?;
    let model = load_checkpoint(&args.model)?;
    let start = config.initial_field()?;
    let raw_goal = match (&args.goal, args.glyph) {
        (Some(path), None) => common::load_field(path, &config)?,
        (None, glyph) => synth::carve_glyph_target(&start, glyph.unwrap_or('X'), 8.0, 6.0)?,
        (Some(_), Some(_)) => bail!(sculpt_core::Error::InvalidConfig(
            "--goal and --glyph are mutually exclusive".into()
        )),
    };
    let out = common::prepare_out_dir(args.common.out.as_deref(), "noise-sweep")?;
    common::snapshot_config(&out, &config)?;

    let goal = adjust_goal(&raw_goal, &start, config.planner.goal_weights)?;
    let objective = PlanObjective::new(
        goal.adjusted.clone(),
        config.planner.w_3d,
        config.planner.w_viz,
    )?;
    // plan once (the plan stays fixed while execution noise grows)
    let plan = greedy_init(
        args.actions,
        &start,
        &objective,
        &model,
        &config.bounds,
        ActionKind::Push,
        config.planner.trials,
        config.seed,
    )?;
    let (plan, _) = refine(
        &plan,
        &start,
        &objective,
        &model,
        &config.bounds,
        &config.refine_config(config.seed),
    )?;
    let result = noise_sweep(
        &model,
        &start,
        &goal.adjusted,
        &plan.actions,
        &config.bounds,
        &sigmas,
        args.trials,
        config.seed ^ 0x9e37,
    )
    .context("noise sweep")?;
    result.write_csv(&out.join("noise.csv"))?;
    let s3d: Vec<(f64, f64)> = result.sigmas.iter().zip(&result.l_3d).map(|(&s, &l)| (s, l)).collect();
    let sviz: Vec<(f64, f64)> =
        result.sigmas.iter().zip(&result.l_viz).map(|(&s, &l)| (s, l)).collect();
    write_curves_png(&[&s3d, &sviz], &out.join("noise.png"))?;
    std::fs::write(
        out.join("result.json"),
        serde_json::to_string_pretty(&result)?,
    )?;
    for i in 0..result.sigmas.len() {
        println!(
            "sigma {:>5.3}: L_3D {:.6} (baseline {:.6}), L_viz {:.6} (baseline {:.6})",
            result.sigmas[i],
            result.l_3d[i],
            result.baseline_l_3d,
            result.l_viz[i],
            result.baseline_l_viz
        );
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn pinch_vs_push(args: PinchVsPushArgs) -> Result<()> {
    let mut config = common::load_config(args.common.config.as_deref())?.harmonized();
    if let Some(seed) = args.common.seed {
        config.seed = seed;
    }
    config.planner.n_actions = args.actions;
    if let Some(k) = args.chunk {
        config.planner.exec_chunk = k.min(args.actions);
    }
    if let Some(t) = args.trials {
        config.planner.trials = t;
    }
    if let Some(i) = args.refine_iters {
        config.planner.refine_iters = i;
    }
    let out = common::prepare_out_dir(args.common.out.as_deref(), "pinch-vs-push")?;
    common::snapshot_config(&out, &config)?;

    // shared setup: flatten a raised ridge back into the slab
    let base = config.initial_field()?;
    let start = synth::raised_ridge(&base, (0.3, 0.5), (0.7, 0.5), 6.0, 4.0)?;
    let goal = adjust_goal(&base, &start, config.planner.goal_weights)?;

    let push_model = load_checkpoint(&args.push_model)?;
    let pinch_model = load_checkpoint(&args.pinch_model)?;

    let mut push_cfg = config.mpc_config(ActionKind::Push);
    push_cfg.patches_dir = None;
    let push_tool = config.tool.build()?;
    let mut push_world = OracleWorld::new(config.material.clone(), push_tool, config.seed ^ 0xaa);
    let (push_log, _) = mpc_sculpt(&start, &goal, &push_model, &mut push_world, &push_cfg)
        .context("push run")?;

    let mut pinch_cfg = config.mpc_config(ActionKind::Pinch);
    pinch_cfg.patches_dir = None;
    let mut gripper_spec = config.tool.clone();
    gripper_spec.mode = ToolMode::GripperPair;
    let gripper = gripper_spec.build()?;
    let mut pinch_world = OracleWorld::new(config.material.clone(), gripper, config.seed ^ 0xbb);
    let (pinch_log, _) = mpc_sculpt(&start, &goal, &pinch_model, &mut pinch_world, &pinch_cfg)
        .context("pinch run")?;

    push_log.write_jsonl(&out.join("push_log.jsonl"))?;
    pinch_log.write_jsonl(&out.join("pinch_log.jsonl"))?;
    write_losses_csv(&out.join("losses.csv"), &push_log, &pinch_log)?;
    let push_viz: Vec<(f64, f64)> = curve(&push_log, true);
    let pinch_viz: Vec<(f64, f64)> = curve(&pinch_log, true);
    write_curves_png(&[&push_viz, &pinch_viz], &out.join("viz_losses.png"))?;
    let summary = serde_json::json!({
        "push_final_loss_3d": push_log.final_loss_3d,
        "push_final_loss_viz": push_log.final_loss_viz,
        "pinch_final_loss_3d": pinch_log.final_loss_3d,
        "pinch_final_loss_viz": pinch_log.final_loss_viz,
    });
    std::fs::write(out.join("result.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "push:  L_3D {:.6} -> {:.6}, L_viz {:.6} -> {:.6}",
        push_log.initial_loss_3d,
        push_log.final_loss_3d,
        push_log.initial_loss_viz,
        push_log.final_loss_viz
    );
    println!(
        "pinch: L_3D {:.6} -> {:.6}, L_viz {:.6} -> {:.6}",
        pinch_log.initial_loss_3d,
        pinch_log.final_loss_3d,
        pinch_log.initial_loss_viz,
        pinch_log.final_loss_viz
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

fn curve(log: &ExecutionLog, viz: bool) -> Vec<(f64, f64)> {
    log.steps
        .iter()
        .map(|s| {
            (
                s.step as f64,
                if viz { s.post_loss_viz } else { s.post_loss_3d },
            )
        })
        .collect()
}

fn write_losses_csv(path: &Path, push: &ExecutionLog, pinch: &ExecutionLog) -> Result<()> {
    let mut out = String::from("step,push_l_3d,push_l_viz,pinch_l_3d,pinch_l_viz\n");
    let n = push.steps.len().max(pinch.steps.len());
    for i in 0..n {
        let p3 = push.steps.get(i).map_or(f64::NAN, |s| s.post_loss_3d);
        let pv = push.steps.get(i).map_or(f64::NAN, |s| s.post_loss_viz);
        let q3 = pinch.steps.get(i).map_or(f64::NAN, |s| s.post_loss_3d);
        let qv = pinch.steps.get(i).map_or(f64::NAN, |s| s.post_loss_viz);
        out.push_str(&format!("{i},{p3},{pv},{q3},{qv}\n"));
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// A ridge start plus flat goal shared by doc examples and tests.
#[allow(dead_code)]
fn ridge_setup(config: &RunConfig) -> Result<(HeightField, HeightField)> {
    let base = config.initial_field()?;
    let start = synth::raised_ridge(&base, (0.3, 0.5), (0.7, 0.5), 6.0, 4.0)?;
    Ok((start, base))
}
