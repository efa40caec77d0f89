//! Mini-batch training of the dynamics model on canonical patches.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::Graph;
use crate::nn::model::DynamicsModel;
use crate::nn::tensor::Tensor;
use crate::sim::TrainingRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Depth MSE only.
    ThreeD,
    /// Depth MSE plus the spatial-gradient term, equally weighted.
    ThreeDPlusViz,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "3d" => Ok(Objective::ThreeD),
            "3d+viz" => Ok(Objective::ThreeDPlusViz),
            other => Err(Error::InvalidConfig(format!(
                "unknown objective '{other}' (expected 3d or 3d+viz)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Gradient descent with momentum 0.9.
    Momentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Step decay: learning rate multiplies by `lr_decay` every `lr_step` epochs.
    pub lr_decay: f64,
    pub lr_step: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::ThreeDPlusViz,
            epochs: 60,
            batch_size: 10,
            optimizer: OptimizerKind::Adam,
            learning_rate: 2e-3,
            lr_decay: 0.5,
            lr_step: 25,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Per-epoch loss bookkeeping returned by `train`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Validation loss split by term (3D, viz) regardless of objective.
    pub val_loss_3d: Vec<f64>,
    pub val_loss_viz: Vec<f64>,
}

/// Trains in place. Deterministic given the seed: the 90/10 split comes from
/// one seeded shuffle and batch order from per-epoch seeded shuffles;
/// gradient accumulation is sequential in sample order.
pub fn train(
    model: &mut DynamicsModel,
    records: &[TrainingRecord],
    config: &TrainConfig,
) -> Result<TrainReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("training dataset".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let p = model.config().patch_side;
    for (i, r) in records.iter().enumerate() {
        if r.patch_before.side() != p || r.patch_delta.side() != p {
            return Err(Error::ShapeMismatch {
                expected: format!("patch side {p}"),
                got: format!("record {i}: {}", r.patch_before.side()),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut indices: Vec<usize> = (0..records.len()).collect();
    indices.shuffle(&mut rng);
    let n_val = ((records.len() as f64) * config.val_fraction).round() as usize;
    let n_val = n_val.min(records.len().saturating_sub(1));
    let (val_idx, train_idx) = indices.split_at(n_val);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();

    let mut optimizer = Optimizer::new(config.optimizer, model);
    let mut report = TrainReport::default();
    model.meta.data_hash = data_hash(records);

    for epoch in 0..config.epochs {
        let lr = config.learning_rate
            * config
                .lr_decay
                .powi((epoch / config.lr_step.max(1)) as i32);
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for batch in train_idx.chunks(config.batch_size) {
            let mut grad_acc: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (loss, grads) = sample_loss_and_grads(model, &records[i], config.objective)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at epoch {epoch}, record {i}"
                    )));
                }
                batch_loss += loss;
                for (name, g) in grads {
                    match grad_acc.get_mut(&name) {
                        Some(acc) => {
                            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += v;
                            }
                        }
                        None => {
                            grad_acc.insert(name, g);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grad_acc.values_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            optimizer.step(model, &grad_acc, lr);
            epoch_loss += batch_loss * inv;
            n_batches += 1;
        }
        report.train_loss.push(epoch_loss / n_batches as f64);

        let (val, val3d, valviz) = evaluate_split(model, records, &val_idx, config.objective)?;
        report.val_loss.push(val);
        report.val_loss_3d.push(val3d);
        report.val_loss_viz.push(valviz);
    }

    model.meta.epochs += config.epochs;
    model.meta.train_loss.extend(report.train_loss.iter());
    model.meta.val_loss.extend(report.val_loss.iter());
    Ok(report)
}

/// Mean patch-space losses of the model on a set of records.
pub fn evaluate_patches(
    model: &DynamicsModel,
    records: &[TrainingRecord],
    indices: &[usize],
) -> Result<(f64, f64)> {
    let mut sum3d = 0.0;
    let mut sumviz = 0.0;
    for &i in indices {
        let (l3d, lviz) = patch_losses(model, &records[i])?;
        sum3d += l3d;
        sumviz += lviz;
    }
    let n = indices.len().max(1) as f64;
    Ok((sum3d / n, sumviz / n))
}

fn evaluate_split(
    model: &DynamicsModel,
    records: &[TrainingRecord],
    indices: &[usize],
    objective: Objective,
) -> Result<(f64, f64, f64)> {
    if indices.is_empty() {
        return Ok((f64::NAN, f64::NAN, f64::NAN));
    }
    let (l3d, lviz) = evaluate_patches(model, records, indices)?;
    let combined = match objective {
        Objective::ThreeD => l3d,
        Objective::ThreeDPlusViz => l3d + lviz,
    };
    Ok((combined, l3d, lviz))
}

/// Builds the per-sample loss graph: prediction vs stored delta, in
/// normalized units, with the viz term on physical slopes of the deltas.
fn build_sample_graph(
    model: &DynamicsModel,
    record: &TrainingRecord,
    objective: Objective,
) -> Result<(Graph, crate::nn::model::BoundParams, crate::nn::graph::NodeId)> {
    let cfg = model.config();
    let p = cfg.patch_side;
    let d_max = cfg.d_max_mm;
    let mut g = Graph::with_backward_cache();
    let bound = model.bind(&mut g);
    let patch01: Vec<f64> = record
        .patch_before
        .values()
        .iter()
        .map(|v| v / d_max)
        .collect();
    let target01: Vec<f64> = record
        .patch_delta
        .values()
        .iter()
        .map(|v| v / d_max)
        .collect();
    let patch_id = g.input(Tensor::new(vec![p, p], patch01)?);
    let shape_id = g.input(Tensor::new(vec![2], record.shape01.to_vec())?);
    let pred = model.build_forward(&mut g, &bound, patch_id, shape_id);
    let target_id = g.input(Tensor::new(vec![p, p], target01)?);
    let l3d = g.mse(pred, target_id);
    let loss = match objective {
        Objective::ThreeD => l3d,
        Objective::ThreeDPlusViz => {
            let slope_factor = d_max / cfg.cell_size_mm;
            let gp = g.grad2d(pred, slope_factor);
            let gt = g.grad2d(target_id, slope_factor);
            let lviz = g.mse(gp, gt);
            g.weighted_sum(&[l3d, lviz], &[1.0, 1.0])
        }
    };
    Ok((g, bound, loss))
}

fn sample_loss_and_grads(
    model: &DynamicsModel,
    record: &TrainingRecord,
    objective: Objective,
) -> Result<(f64, Vec<(String, Tensor)>)> {
    let (g, bound, loss) = build_sample_graph(model, record, objective)?;
    let loss_val = g.value(loss).item();
    let mut grads_out = Vec::new();
    let mut grads = g.backward(loss);
    for (name, &id) in bound.iter() {
        if let Some(t) = grads.take(id) {
            grads_out.push((name.clone(), t));
        }
    }
    Ok((loss_val, grads_out))
}

fn patch_losses(model: &DynamicsModel, record: &TrainingRecord) -> Result<(f64, f64)> {
    let cfg = model.config();
    let d_max = cfg.d_max_mm;
    let pred = model.forward_canonical(&record.patch_before, record.shape01)?;
    let n = pred.values().len() as f64;
    let mut sum3d = 0.0;
    for (a, b) in pred.values().iter().zip(record.patch_delta.values()) {
        sum3d += ((a - b) / d_max).powi(2);
    }
    let (pdx, pdy) = pred.gradient();
    let (tdx, tdy) = record.patch_delta.gradient();
    let mut sumviz = 0.0;
    for i in 0..pdx.len() {
        sumviz += (pdx[i] - tdx[i]).powi(2) + (pdy[i] - tdy[i]).powi(2);
    }
    Ok((sum3d / n, sumviz / (2.0 * n)))
}

fn data_hash(records: &[TrainingRecord]) -> u64 {
    // FNV-1a over a stable digest of the dataset
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    eat(records.len() as u64);
    for r in records {
        eat(r.shape01[0].to_bits());
        eat(r.shape01[1].to_bits());
        let s: f64 = r.patch_delta.values().iter().sum();
        eat(s.to_bits());
    }
    h
}

struct Optimizer {
    kind: OptimizerKind,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl Optimizer {
    fn new(kind: OptimizerKind, model: &DynamicsModel) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = model
            .params()
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
            .collect();
        Self {
            kind,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut DynamicsModel, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Momentum => {
                for (name, g) in grads {
                    let m = self.m.get_mut(name).expect("known param");
                    let p = model.params_mut().get_mut(name).expect("known param");
                    for ((pv, mv), gv) in p.data_mut().iter_mut().zip(m).zip(g.data()) {
                        *mv = 0.9 * *mv + gv;
                        *pv -= lr * *mv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                let bc1 = 1.0 - b1.powi(self.t as i32);
                let bc2 = 1.0 - b2.powi(self.t as i32);
                for (name, g) in grads {
                    let m = self.m.get_mut(name).expect("known param");
                    let v = self.v.get_mut(name).expect("known param");
                    let p = model.params_mut().get_mut(name).expect("known param");
                    for i in 0..g.len() {
                        let gv = g.data()[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * gv;
                        v[i] = b2 * v[i] + (1.0 - b2) * gv * gv;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Action, CanonicalPatch, PushAction};
    use crate::nn::model::ModelConfig;
    use rand::Rng;

    fn tiny_model() -> DynamicsModel {
        DynamicsModel::new(ModelConfig {
            patch_side: 16,
            state_channels: [2, 3, 3],
            shape_hidden: [4, 8, 16],
            shape_grid: 4,
            shape_channels: [2, 2, 2],
            fusion_channels: [3, 3, 3, 3, 1],
            kernels: [3, 3, 3],
            nonlinearity: crate::nn::graph::Nonlinearity::Silu,
            init_seed: 1,
            d_max_mm: 80.0,
            cell_size_mm: 2.0,
        })
        .unwrap()
    }

    fn synth_records(n: usize, seed: u64) -> Vec<TrainingRecord> {
        // synthetic smooth target: a bump whose depth scales with z
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let l01: f64 = rng.gen_range(0.0..1.0);
                let z01: f64 = rng.gen_range(0.0..1.0);
                let mut before = vec![40.0; 256];
                for v in before.iter_mut() {
                    *v += rng.gen_range(-0.5..0.5);
                }
                let mut delta = vec![0.0; 256];
                for r in 0..16 {
                    for c in 0..16 {
                        let dx = c as f64 - 4.0 - 6.0 * l01;
                        let dy = r as f64 - 8.0;
                        delta[r * 16 + c] =
                            6.0 * z01 * (-0.08 * (dx * dx + dy * dy)).exp();
                    }
                }
                TrainingRecord {
                    action: Action::Push(PushAction {
                        x: 0.5,
                        y: 0.5,
                        theta: 0.0,
                        length_mm: l01 * 60.0,
                        depth_mm: z01 * 12.0,
                    }),
                    shape01: [l01, z01],
                    patch_before: CanonicalPatch::new(16, 2.0, before).unwrap(),
                    patch_delta: CanonicalPatch::new(16, 2.0, delta).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut model = tiny_model();
        let before = model.params().clone();
        let records = synth_records(8, 2);
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        train(&mut model, &records, &cfg).unwrap();
        assert_eq!(&before, model.params());
    }

    #[test]
    fn training_is_deterministic() {
        let records = synth_records(10, 3);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut m1 = tiny_model();
        let mut m2 = tiny_model();
        let r1 = train(&mut m1, &records, &cfg).unwrap();
        let r2 = train(&mut m2, &records, &cfg).unwrap();
        assert_eq!(m1.params(), m2.params());
        assert_eq!(r1.train_loss, r2.train_loss);
    }

    #[test]
    fn overfits_a_small_dataset() {
        // training loss drops by >= 90% on 10 samples
        let records = synth_records(10, 4);
        let mut model = tiny_model();
        let cfg = TrainConfig {
            objective: Objective::ThreeD,
            epochs: 500,
            batch_size: 10,
            learning_rate: 3e-3,
            lr_decay: 0.5,
            lr_step: 200,
            val_fraction: 0.0,
            seed: 5,
            optimizer: OptimizerKind::Adam,
        };
        let report = train(&mut model, &records, &cfg).unwrap();
        let first = report.train_loss[0];
        let last = *report.train_loss.last().unwrap();
        assert!(
            last <= 0.1 * first,
            "loss {first} -> {last}: less than 90% reduction"
        );
    }

    #[test]
    fn rejects_empty_dataset() {
        let mut model = tiny_model();
        assert!(train(&mut model, &[], &TrainConfig::default()).is_err());
    }
}
