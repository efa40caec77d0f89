//! Self-supervised dataset generation: uniformly sampled actions applied in
//! a chain (with periodic resets), each record storing full fields plus the
//! canonical-pose training pair.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    read_hfd, to_canonical, write_hfd, Action, ActionBounds, ActionKind, CanonicalPatch,
    HeightField, PinchAction, PushAction,
};
use crate::sim::{apply_action, MaterialSpec, ToolMode, ToolProfile, ToolShape};

/// Serializable tool description; rebuilds the rasterized profile on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    #[serde(flatten)]
    pub shape: ToolShape,
    pub compliance: f64,
    pub mode: ToolMode,
    pub gripper_span_mm: f64,
}

impl ToolSpec {
    pub fn rod(radius_mm: f64, compliance: f64, mode: ToolMode) -> Self {
        Self {
            shape: ToolShape::Rod { radius_mm },
            compliance,
            mode,
            gripper_span_mm: 50.0,
        }
    }

    pub fn build(&self) -> Result<ToolProfile> {
        let mut tool = ToolProfile::new(self.shape, self.compliance, self.mode)?;
        tool.gripper_span_mm = self.gripper_span_mm;
        Ok(tool)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub patch_side: usize,
    /// Reset to the initial state every this many actions.
    pub reset_period: usize,
    pub bounds: ActionBounds,
    pub kind: ActionKind,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            patch_side: 64,
            reset_period: 25,
            bounds: ActionBounds::default(),
            kind: ActionKind::Push,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub width: usize,
    pub height: usize,
    pub cell_size_mm: f64,
    pub d_max_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub material: MaterialSpec,
    pub tool: ToolSpec,
    pub seed: u64,
    pub config: DatasetConfig,
    pub field: FieldMeta,
    pub records: Vec<RecordMeta>,
}

/// One training sample in canonical pose, values in mm.
#[derive(Debug, Clone)]
pub struct TrainingRecord {
    pub action: Action,
    /// Shape parameters normalized by their configured maxima.
    pub shape01: [f64; 2],
    pub patch_before: CanonicalPatch,
    pub patch_delta: CanonicalPatch,
}

/// Generates `n` records under `out_dir` and writes `manifest.json`.
///
/// Actions are sampled uniformly over the configured bounds; states chain
/// (each action applies to the previous result) and reset to `initial`
/// every `reset_period` actions. Fully deterministic given the seed.
pub fn generate_dataset(
    initial: &HeightField,
    n: usize,
    material: &MaterialSpec,
    tool: &ToolSpec,
    seed: u64,
    out_dir: &Path,
    config: &DatasetConfig,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be >= 1".into()));
    }
    if config.reset_period == 0 {
        return Err(Error::InvalidConfig("reset_period must be >= 1".into()));
    }
    config.bounds.validate()?;
    material.validate()?;
    let tool_profile = tool.build()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = initial.clone();
    let mut records = Vec::with_capacity(n);

    for i in 0..n {
        if i > 0 && i % config.reset_period == 0 {
            state = initial.clone();
        }
        let action = sample_action(&mut rng, config.kind, &config.bounds);
        let apply_seed: u64 = rng.gen();
        let after = apply_action(&state, &action, material, &tool_profile, apply_seed)?;

        let patch_before = to_canonical(&state, &action, config.patch_side);
        let patch_after = to_canonical(&after, &action, config.patch_side);
        let delta: Vec<f64> = patch_after
            .values()
            .iter()
            .zip(patch_before.values())
            .map(|(a, b)| a - b)
            .collect();

        let dir_name = format!("rec_{i:05}");
        let rec_dir = out_dir.join(&dir_name);
        fs::create_dir_all(&rec_dir).map_err(|e| Error::io(rec_dir.display().to_string(), e))?;
        write_hfd(&state, &rec_dir.join("before.hfd"))?;
        write_hfd(&after, &rec_dir.join("after.hfd"))?;
        write_patch(&patch_before, state.d_max(), &rec_dir.join("patch_before.hfd"))?;
        let delta_patch = CanonicalPatch::new(config.patch_side, state.cell_size(), delta)?;
        write_patch(&delta_patch, state.d_max(), &rec_dir.join("patch_delta.hfd"))?;
        let action_path = rec_dir.join("action.json");
        let json = serde_json::to_string_pretty(&action)?;
        fs::write(&action_path, json).map_err(|e| Error::io(action_path.display().to_string(), e))?;

        records.push(RecordMeta { dir: dir_name });
        state = after;
    }

    let manifest = DatasetManifest {
        version: 1,
        material: material.clone(),
        tool: tool.clone(),
        seed,
        config: config.clone(),
        field: FieldMeta {
            width: initial.width(),
            height: initial.height(),
            cell_size_mm: initial.cell_size(),
            d_max_mm: initial.d_max(),
        },
        records,
    };
    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(manifest)
}

fn sample_action(rng: &mut ChaCha8Rng, kind: ActionKind, bounds: &ActionBounds) -> Action {
    let x = rng.gen_range(0.0..=1.0);
    let y = rng.gen_range(0.0..=1.0);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let depth_mm = rng.gen_range(0.0..=bounds.z_max_mm);
    match kind {
        ActionKind::Push => Action::Push(PushAction {
            x,
            y,
            theta,
            length_mm: rng.gen_range(0.0..=bounds.l_max_mm),
            depth_mm,
        }),
        ActionKind::Pinch => Action::Pinch(PinchAction {
            x,
            y,
            theta,
            close_dist_mm: rng.gen_range(0.0..=bounds.c_max_mm),
            depth_mm,
        }),
    }
}

/// Patches ride in the HFD container; deltas may be negative, so they skip
/// range validation on load.
fn write_patch(patch: &CanonicalPatch, d_max: f64, path: &Path) -> Result<()> {
    let carrier = HeightField::from_raw(
        patch.side(),
        patch.side(),
        patch.cell_size(),
        d_max,
        patch.values().to_vec(),
    )?;
    write_hfd(&carrier, path)
}

fn read_patch(path: &Path) -> Result<CanonicalPatch> {
    let carrier = read_hfd(path, false)?;
    if carrier.width() != carrier.height() {
        return Err(Error::format(
            path.display().to_string(),
            "patch must be square",
        ));
    }
    CanonicalPatch::new(
        carrier.width(),
        carrier.cell_size(),
        carrier.depths().to_vec(),
    )
}

pub fn load_manifest(dataset_dir: &Path) -> Result<DatasetManifest> {
    let path = dataset_dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&text)?)
}

impl DatasetManifest {
    pub fn record_dir(&self, dataset_dir: &Path, index: usize) -> PathBuf {
        dataset_dir.join(&self.records[index].dir)
    }

    /// Loads the full before/after fields of one record.
    pub fn load_fields(&self, dataset_dir: &Path, index: usize) -> Result<(HeightField, HeightField)> {
        let dir = self.record_dir(dataset_dir, index);
        Ok((
            read_hfd(&dir.join("before.hfd"), true)?,
            read_hfd(&dir.join("after.hfd"), true)?,
        ))
    }

    pub fn load_action(&self, dataset_dir: &Path, index: usize) -> Result<Action> {
        let path = self.record_dir(dataset_dir, index).join("action.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Loads the canonical training pairs of `indices` (or all records).
pub fn load_training_records(
    dataset_dir: &Path,
    manifest: &DatasetManifest,
    indices: Option<&[usize]>,
) -> Result<Vec<TrainingRecord>> {
    let all: Vec<usize> = (0..manifest.records.len()).collect();
    let indices = indices.unwrap_or(&all);
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let dir = manifest.record_dir(dataset_dir, i);
        let action = manifest.load_action(dataset_dir, i)?;
        let patch_before = read_patch(&dir.join("patch_before.hfd"))?;
        let patch_delta = read_patch(&dir.join("patch_delta.hfd"))?;
        let shape01 = action.shape_params_normalized(&manifest.config.bounds);
        out.push(TrainingRecord {
            action,
            shape01,
            patch_before,
            patch_delta,
        });
    }
    Ok(out)
}
