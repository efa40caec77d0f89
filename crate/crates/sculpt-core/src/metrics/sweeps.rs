//! Experiment harnesses: cross-material transfer, sample efficiency and
//! action-noise sensitivity.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Action, ActionBounds, HeightField};
use crate::metrics::eval::eval_model;
use crate::nn::{loss_3d, loss_viz, train, DynamicsModel, ModelConfig, TrainConfig};
use crate::plan::{build_rollout, rollout_final_state, PlanObjective};
use crate::sim::{generate_dataset, load_training_records, DatasetConfig, MaterialSpec, ToolSpec};

/// Shared knobs for dataset-generating experiments.
#[derive(Debug, Clone)]
pub struct ExperimentContext {
    pub initial: HeightField,
    pub tool: ToolSpec,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Datasets and intermediate artifacts land here.
    pub work_dir: PathBuf,
}

impl ExperimentContext {
    fn train_model_on(&self, dataset_dir: &Path, salt: u64) -> Result<DynamicsModel> {
        let manifest = crate::sim::load_manifest(dataset_dir)?;
        let records = load_training_records(dataset_dir, &manifest, None)?;
        let mut config = self.model.clone();
        config.init_seed = self.seed.wrapping_add(salt);
        config.d_max_mm = manifest.field.d_max_mm;
        config.cell_size_mm = manifest.field.cell_size_mm;
        config.patch_side = manifest.config.patch_side;
        let mut model = DynamicsModel::new(config)?;
        let train_cfg = TrainConfig {
            seed: self.train.seed.wrapping_add(salt),
            ..self.train.clone()
        };
        train(&mut model, &records, &train_cfg)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossMaterialResult {
    pub materials: Vec<String>,
    /// Row-major `[train][test]` full-field L_3D.
    pub l_3d: Vec<f64>,
}

impl CrossMaterialResult {
    pub fn at(&self, train: usize, test: usize) -> f64 {
        self.l_3d[train * self.materials.len() + test]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("train_material,test_material,l_3d\n");
        for (i, mi) in self.materials.iter().enumerate() {
            for (j, mj) in self.materials.iter().enumerate() {
                out.push_str(&format!("{mi},{mj},{}\n", self.at(i, j)));
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Trains one model per material and evaluates each on every material's
/// held-out set (the transfer grid).
pub fn cross_material_matrix(
    ctx: &ExperimentContext,
    materials: &[MaterialSpec],
    n_train: usize,
    n_test: usize,
) -> Result<CrossMaterialResult> {
    if materials.is_empty() {
        return Err(Error::EmptyInput("materials".into()));
    }
    let mut test_sets = Vec::new();
    let mut models = Vec::new();
    for (i, m) in materials.iter().enumerate() {
        let train_dir = ctx.work_dir.join(format!("cm_train_{}", m.name));
        let test_dir = ctx.work_dir.join(format!("cm_test_{}", m.name));
        generate_dataset(
            &ctx.initial,
            n_train,
            m,
            &ctx.tool,
            ctx.seed.wrapping_add(1000 + i as u64),
            &train_dir,
            &ctx.dataset,
        )?;
        let test_manifest = generate_dataset(
            &ctx.initial,
            n_test,
            m,
            &ctx.tool,
            ctx.seed.wrapping_add(2000 + i as u64),
            &test_dir,
            &ctx.dataset,
        )?;
        models.push(ctx.train_model_on(&train_dir, i as u64)?);
        test_sets.push((test_dir, test_manifest));
    }
    let n = materials.len();
    let mut l_3d = vec![0.0; n * n];
    for (i, model) in models.iter().enumerate() {
        for (j, (dir, manifest)) in test_sets.iter().enumerate() {
            let report = eval_model(model, dir, manifest, None, None)?;
            l_3d[i * n + j] = report.l_3d;
        }
    }
    Ok(CrossMaterialResult {
        materials: materials.iter().map(|m| m.name.clone()).collect(),
        l_3d,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEfficiencyResult {
    pub sizes: Vec<usize>,
    pub val_l_3d: Vec<f64>,
}

impl SampleEfficiencyResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("n_train,val_l_3d\n");
        for (s, l) in self.sizes.iter().zip(&self.val_l_3d) {
            out.push_str(&format!("{s},{l}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Trains one model per dataset size (prefixes of one chained dataset, so
/// smaller sets are strict subsets) against a shared held-out set.
pub fn sample_efficiency_sweep(
    ctx: &ExperimentContext,
    material: &MaterialSpec,
    sizes: &[usize],
    n_test: usize,
) -> Result<SampleEfficiencyResult> {
    if sizes.is_empty() {
        return Err(Error::EmptyInput("sizes".into()));
    }
    let max_n = *sizes.iter().max().expect("nonempty");
    let train_dir = ctx.work_dir.join(format!("se_train_{}", material.name));
    let test_dir = ctx.work_dir.join(format!("se_test_{}", material.name));
    let train_manifest = generate_dataset(
        &ctx.initial,
        max_n,
        material,
        &ctx.tool,
        ctx.seed.wrapping_add(3000),
        &train_dir,
        &ctx.dataset,
    )?;
    let test_manifest = generate_dataset(
        &ctx.initial,
        n_test,
        material,
        &ctx.tool,
        ctx.seed.wrapping_add(4000),
        &test_dir,
        &ctx.dataset,
    )?;
    let mut val_l_3d = Vec::with_capacity(sizes.len());
    for (k, &size) in sizes.iter().enumerate() {
        if size == 0 || size > max_n {
            return Err(Error::InvalidConfig(format!("bad sweep size {size}")));
        }
        let records = load_training_records(
            &train_dir,
            &train_manifest,
            Some(&(0..size).collect::<Vec<_>>()),
        )?;
        let mut config = ctx.model.clone();
        config.init_seed = ctx.seed.wrapping_add(5000 + k as u64);
        config.d_max_mm = train_manifest.field.d_max_mm;
        config.cell_size_mm = train_manifest.field.cell_size_mm;
        config.patch_side = train_manifest.config.patch_side;
        let mut model = DynamicsModel::new(config)?;
        train(&mut model, &records, &ctx.train)?;
        let report = eval_model(&model, &test_dir, &test_manifest, None, None)?;
        val_l_3d.push(report.l_3d);
    }
    Ok(SampleEfficiencyResult {
        sizes: sizes.to_vec(),
        val_l_3d,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSweepResult {
    pub sigmas: Vec<f64>,
    pub l_3d: Vec<f64>,
    pub l_viz: Vec<f64>,
    /// Losses of taking no actions at all.
    pub baseline_l_3d: f64,
    pub baseline_l_viz: f64,
}

impl NoiseSweepResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sigma,l_3d,l_viz,baseline_l_3d,baseline_l_viz\n");
        for i in 0..self.sigmas.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.sigmas[i], self.l_3d[i], self.l_viz[i], self.baseline_l_3d, self.baseline_l_viz
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Smallest sigma whose mean loss exceeds the zero-action baseline.
    pub fn crossover_sigma(&self, viz: bool) -> Option<f64> {
        let (losses, base) = if viz {
            (&self.l_viz, self.baseline_l_viz)
        } else {
            (&self.l_3d, self.baseline_l_3d)
        };
        self.sigmas
            .iter()
            .zip(losses)
            .find(|(_, &l)| l > base)
            .map(|(&s, _)| s)
    }
}

/// Perturbs each normalized action parameter with Gaussian noise of the
/// given sigmas, rolls the plan out through the dynamics model and averages
/// the final losses over trials. A simulated actuation gap: the plan stays
/// fixed while execution wobbles.
pub fn noise_sweep(
    model: &DynamicsModel,
    start: &HeightField,
    target: &HeightField,
    actions: &[Action],
    bounds: &ActionBounds,
    sigmas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<NoiseSweepResult> {
    if actions.is_empty() {
        return Err(Error::EmptyInput("plan actions".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be >= 1".into()));
    }
    let kind = actions[0].kind();
    let base: Vec<[f64; 5]> = actions.iter().map(|a| a.to_normalized(bounds)).collect();
    let objective = PlanObjective::new(target.clone(), 1.0, 1.0)?;
    let baseline_l_3d = loss_3d(start, target)?;
    let baseline_l_viz = loss_viz(start, target)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l_3d = Vec::with_capacity(sigmas.len());
    let mut l_viz = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        if sigma < 0.0 {
            return Err(Error::InvalidConfig(format!("negative sigma {sigma}")));
        }
        let mut acc3d = 0.0;
        let mut accviz = 0.0;
        let n_trials = if sigma == 0.0 { 1 } else { trials };
        for _ in 0..n_trials {
            let mut perturbed = base.clone();
            for p in perturbed.iter_mut() {
                for v in p.iter_mut() {
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                    *v += z * sigma;
                }
                // execution stays physical: clamp, wrap the angle
                p[0] = p[0].clamp(0.0, 1.0);
                p[1] = p[1].clamp(0.0, 1.0);
                p[2] = p[2].rem_euclid(1.0);
                p[3] = p[3].clamp(0.0, 1.0);
                p[4] = p[4].clamp(0.0, 1.0);
            }
            let rollout = build_rollout(model, start, &perturbed, kind, &objective)?;
            let final_state = rollout_final_state(&rollout, start)?;
            acc3d += loss_3d(&final_state, target)?;
            accviz += loss_viz(&final_state, target)?;
        }
        l_3d.push(acc3d / n_trials as f64);
        l_viz.push(accviz / n_trials as f64);
    }
    Ok(NoiseSweepResult {
        sigmas: sigmas.to_vec(),
        l_3d,
        l_viz,
        baseline_l_3d,
        baseline_l_viz,
    })
}
