//! Held-out evaluation of a dynamics model against oracle records.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::to_point_cloud;
use crate::metrics::distance::{chamfer, emd};
use crate::nn::{loss_3d, loss_viz, DynamicsModel};
use crate::sim::DatasetManifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub l_3d: f64,
    pub l_viz: f64,
    pub chamfer: f64,
    pub emd: f64,
    /// False when any EMD fell back to the greedy approximation.
    pub emd_exact: bool,
    pub material: String,
    pub tool: String,
    pub objective: String,
    pub dataset_hash: u64,
    pub n_samples: usize,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("l_3d", self.l_3d),
            ("l_viz", self.l_viz),
            ("chamfer", self.chamfer),
            ("emd", self.emd),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::NonFinite(format!("metric {name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Averages full-field losses and voxel-downsampled cloud metrics over
/// held-out records. Record order cannot change the result: per-record
/// values are sorted before summation.
///
/// `voxel_size_mm` defaults to field extent / 24.
pub fn eval_model(
    model: &DynamicsModel,
    dataset_dir: &Path,
    manifest: &DatasetManifest,
    indices: Option<&[usize]>,
    voxel_size_mm: Option<f64>,
) -> Result<MetricReport> {
    eval_predictor(
        &mut |before, action| model.predict(before, action, &manifest.config.bounds),
        dataset_dir,
        manifest,
        indices,
        voxel_size_mm,
    )
}

/// [`eval_model`] over an arbitrary one-step predictor; lets tests measure
/// the oracle itself or a frozen baseline through the same pipeline.
pub fn eval_predictor(
    predict: &mut dyn FnMut(
        &crate::field::HeightField,
        &crate::field::Action,
    ) -> Result<crate::field::HeightField>,
    dataset_dir: &Path,
    manifest: &DatasetManifest,
    indices: Option<&[usize]>,
    voxel_size_mm: Option<f64>,
) -> Result<MetricReport> {
    let all: Vec<usize> = (0..manifest.records.len()).collect();
    let indices = indices.unwrap_or(&all);
    if indices.is_empty() {
        return Err(Error::EmptyInput("evaluation set".into()));
    }
    let voxel = voxel_size_mm.unwrap_or_else(|| {
        manifest.field.width as f64 * manifest.field.cell_size_mm / 24.0
    });
    let mut l3d = Vec::with_capacity(indices.len());
    let mut lviz = Vec::with_capacity(indices.len());
    let mut cds = Vec::with_capacity(indices.len());
    let mut emds = Vec::with_capacity(indices.len());
    let mut all_exact = true;
    for &i in indices {
        let (before, after) = manifest.load_fields(dataset_dir, i)?;
        let action = manifest.load_action(dataset_dir, i)?;
        let pred = predict(&before, &action)?;
        l3d.push(loss_3d(&pred, &after)?);
        lviz.push(loss_viz(&pred, &after)?);
        let (cloud_pred, cloud_truth) = clouds_within_emd_limit(&pred, &after, voxel)?;
        cds.push(chamfer(&cloud_pred, &cloud_truth)?);
        let r = emd(&cloud_pred, &cloud_truth, manifest.seed.wrapping_add(i as u64))?;
        emds.push(r.value);
        all_exact &= r.exact;
    }
    let mean_sorted = |mut v: Vec<f64>| -> f64 {
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / v.len() as f64
    };
    let report = MetricReport {
        l_3d: mean_sorted(l3d),
        l_viz: mean_sorted(lviz),
        chamfer: mean_sorted(cds),
        emd: mean_sorted(emds),
        emd_exact: all_exact,
        material: manifest.material.name.clone(),
        tool: format!("{:?}", manifest.tool.shape),
        objective: String::new(),
        dataset_hash: dataset_digest(manifest),
        n_samples: indices.len(),
    };
    report.validate()?;
    Ok(report)
}

/// Down-samples both fields with a shared voxel size, coarsening it until
/// the clouds fit the EMD size cap (depth bucketing can split xy columns
/// across z levels, inflating the count past the xy grid).
fn clouds_within_emd_limit(
    a: &crate::field::HeightField,
    b: &crate::field::HeightField,
    voxel0: f64,
) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    let mut voxel = voxel0;
    for _ in 0..16 {
        let ca = to_point_cloud(a, voxel)?;
        let cb = to_point_cloud(b, voxel)?;
        if ca.len().max(cb.len()) <= crate::metrics::distance::EMD_MAX_POINTS {
            return Ok((ca, cb));
        }
        voxel *= 1.25;
    }
    Err(Error::InvalidConfig(
        "could not reach the EMD point cap by coarsening".into(),
    ))
}

fn dataset_digest(manifest: &DatasetManifest) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in [manifest.seed, manifest.records.len() as u64] {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// L_3D of predicting "no change" on each record: the zero-delta baseline.
pub fn zero_delta_baseline(
    dataset_dir: &Path,
    manifest: &DatasetManifest,
    indices: Option<&[usize]>,
) -> Result<(f64, f64)> {
    let all: Vec<usize> = (0..manifest.records.len()).collect();
    let indices = indices.unwrap_or(&all);
    if indices.is_empty() {
        return Err(Error::EmptyInput("evaluation set".into()));
    }
    let mut l3d = Vec::with_capacity(indices.len());
    let mut lviz = Vec::with_capacity(indices.len());
    for &i in indices {
        let (before, after) = manifest.load_fields(dataset_dir, i)?;
        l3d.push(loss_3d(&before, &after)?);
        lviz.push(loss_viz(&before, &after)?);
    }
    let mean_sorted = |mut v: Vec<f64>| -> f64 {
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / v.len() as f64
    };
    Ok((mean_sorted(l3d), mean_sorted(lviz)))
}
