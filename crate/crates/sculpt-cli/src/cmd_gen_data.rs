//! `sculpt gen-data`: the self-generating data creation phase.

use anyhow::{bail, Context, Result};
use sculpt_core::field::ActionKind;
use sculpt_core::sim::{generate_dataset, MaterialSpec, ToolMode};

use crate::common;
use crate::GenDataArgs;

pub fn run(args: GenDataArgs) -> Result<()> {
    let mut config = common::load_config(args.common.config.as_deref())?.harmonized();
    if let Some(seed) = args.common.seed {
        config.seed = seed;
    }
    if let Some(name) = &args.material {
        config.material = MaterialSpec::preset(name)?;
    }
    let kind = match args.kind.as_str() {
        "push" => ActionKind::Push,
        "pinch" => ActionKind::Pinch,
        other => bail!(sculpt_core::Error::InvalidConfig(format!(
            "unknown action kind '{other}' (push or pinch)"
        ))),
    };
    let mode = match kind {
        ActionKind::Push => ToolMode::SingleTip,
        ActionKind::Pinch => ToolMode::GripperPair,
    };
    if let Some(name) = &args.tool {
        config.tool = common::tool_by_name(name, config.tool.compliance, mode)?;
    } else {
        config.tool.mode = mode;
    }
    config.validate()?;

    let out = common::prepare_out_dir(args.common.out.as_deref(), "gen-data")?;
    common::snapshot_config(&out, &config)?;
    let initial = config.initial_field()?;
    let dataset_cfg = config.dataset_config(kind);
    let manifest = generate_dataset(
        &initial,
        args.samples,
        &config.material,
        &config.tool,
        config.seed,
        &out,
        &dataset_cfg,
    )
    .context("generating dataset")?;
    println!(
        "wrote {} records ({} material, {:?} tool) to {}",
        manifest.records.len(),
        manifest.material.name,
        manifest.tool.shape,
        out.display()
    );
    Ok(())
}
