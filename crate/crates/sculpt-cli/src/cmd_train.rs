//! `sculpt train`: fit the dynamics model to a dataset.

use anyhow::{Context, Result};
use sculpt_core::nn::{save_checkpoint, train, DynamicsModel};
use sculpt_core::sim::{load_manifest, load_training_records};

use crate::common;
use crate::TrainArgs;

pub fn run(args: TrainArgs) -> Result<()> {
    let mut config = common::load_config(args.common.config.as_deref())?;
    if let Some(seed) = args.common.seed {
        config.seed = seed;
        config.train.seed = seed;
    }
    if let Some(loss) = &args.loss {
        config.train.objective = loss.parse()?;
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    if let Some(batch) = args.batch {
        config.train.batch_size = batch;
    }
    if let Some(lr) = args.lr {
        config.train.learning_rate = lr;
    }

    let manifest = load_manifest(&args.data).context("loading dataset manifest")?;
    let records = load_training_records(&args.data, &manifest, None)?;

    // the model must normalize exactly like the data it learns from
    let mut model_cfg = config.model.clone();
    model_cfg.patch_side = manifest.config.patch_side;
    model_cfg.d_max_mm = manifest.field.d_max_mm;
    model_cfg.cell_size_mm = manifest.field.cell_size_mm;
    model_cfg.init_seed = config.seed;
    let mut model = DynamicsModel::new(model_cfg)?;

    let out = common::prepare_out_dir(args.common.out.as_deref(), "train")?;
    common::snapshot_config(&out, &config)?;

    let report = train(&mut model, &records, &config.train).context("training")?;
    let ckpt = out.join("model.p2d");
    save_checkpoint(&model, &ckpt)?;
    let history = out.join("training.json");
    std::fs::write(&history, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", history.display()))?;
    let last_train = report.train_loss.last().copied().unwrap_or(f64::NAN);
    let last_val = report.val_loss.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} epochs on {} records: train {last_train:.6}, val {last_val:.6}; checkpoint {}",
        config.train.epochs,
        records.len(),
        ckpt.display()
    );
    Ok(())
}
