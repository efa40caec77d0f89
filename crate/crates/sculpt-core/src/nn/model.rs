//! The param2deform dynamics model: a small convolutional network that
//! predicts canonical-pose depth deltas from (canonical state, l, z).
//!
//! Topology: the two shape scalars pass through 3 linear layers, reshape to
//! a 2D grid and 3 conv layers; the state patch is concatenated with its
//! spatial gradient (3 input channels) and encoded by 3 conv layers; the
//! state features, raw state and shape encoding concatenate into 5 conv
//! layers that emit the single-channel delta.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{anchor_for, Action, ActionBounds, ActionKind, CanonicalPatch, HeightField};
use crate::nn::graph::{Graph, NodeId, Nonlinearity};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Canonical patch resolution P.
    pub patch_side: usize,
    /// Channels after each of the 3 state-branch convs.
    pub state_channels: [usize; 3],
    /// Hidden sizes of the 3 shape-branch linear layers; the last must be
    /// `shape_grid^2`.
    pub shape_hidden: [usize; 3],
    /// Side of the 2D grid the shape vector reshapes to.
    pub shape_grid: usize,
    /// Channels after each of the 3 shape-branch convs.
    pub shape_channels: [usize; 3],
    /// Channels after each of the 5 fusion convs; the last must be 1.
    pub fusion_channels: [usize; 5],
    /// Kernel sizes per stage: state, shape, fusion.
    pub kernels: [usize; 3],
    pub nonlinearity: Nonlinearity,
    pub init_seed: u64,
    /// Depth normalization the model was (or will be) trained with.
    pub d_max_mm: f64,
    pub cell_size_mm: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_side: 64,
            state_channels: [8, 12, 12],
            shape_hidden: [32, 128, 256],
            shape_grid: 16,
            shape_channels: [6, 6, 6],
            fusion_channels: [12, 12, 12, 12, 1],
            kernels: [3, 3, 3],
            nonlinearity: Nonlinearity::Silu,
            init_seed: 0,
            d_max_mm: 80.0,
            cell_size_mm: 304.8 / 128.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side < 8 {
            return Err(Error::InvalidConfig("patch_side must be >= 8".into()));
        }
        if self.shape_grid * self.shape_grid != self.shape_hidden[2] {
            return Err(Error::InvalidConfig(format!(
                "last shape hidden size {} must equal shape_grid^2 = {}",
                self.shape_hidden[2],
                self.shape_grid * self.shape_grid
            )));
        }
        if self.fusion_channels[4] != 1 {
            return Err(Error::InvalidConfig(
                "final fusion conv must emit 1 channel".into(),
            ));
        }
        for k in self.kernels {
            if k == 0 || k % 2 == 0 {
                return Err(Error::InvalidConfig(format!("kernel {k} must be odd")));
            }
        }
        if self.state_channels.iter().any(|&c| c == 0)
            || self.shape_channels.iter().any(|&c| c == 0)
            || self.shape_hidden.iter().any(|&c| c == 0)
            || self.fusion_channels[..4].iter().any(|&c| c == 0)
        {
            return Err(Error::InvalidConfig("zero channel width".into()));
        }
        if !(self.d_max_mm > 0.0) || !(self.cell_size_mm > 0.0) {
            return Err(Error::InvalidConfig(
                "model normalization scales must be positive".into(),
            ));
        }
        Ok(())
    }

    /// (name, shape) of every parameter tensor, in checkpoint order.
    pub fn parameter_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let lin_dims = [
            (self.shape_hidden[0], 2),
            (self.shape_hidden[1], self.shape_hidden[0]),
            (self.shape_hidden[2], self.shape_hidden[1]),
        ];
        for (i, (m, n)) in lin_dims.iter().enumerate() {
            specs.push((format!("shape_lin{i}.w"), vec![*m, *n]));
            specs.push((format!("shape_lin{i}.b"), vec![*m]));
        }
        let ks = self.kernels[1];
        let mut c_in = 1;
        for (i, &c_out) in self.shape_channels.iter().enumerate() {
            specs.push((format!("shape_conv{i}.w"), vec![c_out, c_in, ks, ks]));
            specs.push((format!("shape_conv{i}.b"), vec![c_out]));
            c_in = c_out;
        }
        let kst = self.kernels[0];
        let mut c_in = 3;
        for (i, &c_out) in self.state_channels.iter().enumerate() {
            specs.push((format!("state_conv{i}.w"), vec![c_out, c_in, kst, kst]));
            specs.push((format!("state_conv{i}.b"), vec![c_out]));
            c_in = c_out;
        }
        let kf = self.kernels[2];
        let mut c_in = self.state_channels[2] + 1 + self.shape_channels[2];
        for (i, &c_out) in self.fusion_channels.iter().enumerate() {
            specs.push((format!("fusion_conv{i}.w"), vec![c_out, c_in, kf, kf]));
            specs.push((format!("fusion_conv{i}.b"), vec![c_out]));
            c_in = c_out;
        }
        specs
    }
}

/// Training bookkeeping carried on the model (not persisted in checkpoints).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainMeta {
    pub epochs: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub data_hash: u64,
}

/// A trained (or initialized) dynamics model: config plus named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    pub meta: TrainMeta,
}

impl DynamicsModel {
    /// He-style initialization; the final fusion conv starts at zero so an
    /// untrained model predicts zero delta.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = BTreeMap::new();
        for (name, shape) in config.parameter_specs() {
            let n: usize = shape.iter().product();
            let is_weight = name.ends_with(".w");
            let is_head = name.starts_with("fusion_conv4");
            let data = if !is_weight || is_head {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n)
                    // sample in f32 so freshly saved checkpoints are exact
                    .map(|_| {
                        let (u1, u2): (f64, f64) =
                            (rng.gen_range(f64::MIN_POSITIVE..1.0), rng.gen_range(0.0..1.0));
                        let z = (-2.0 * u1.ln()).sqrt()
                            * (std::f64::consts::TAU * u2).cos();
                        (z * std) as f32 as f64
                    })
                    .collect()
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self {
            config,
            params,
            meta: TrainMeta::default(),
        })
    }

    pub fn from_parts(
        config: ModelConfig,
        params: BTreeMap<String, Tensor>,
        meta: TrainMeta,
    ) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.parameter_specs() {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{name}: {shape:?}"),
                        got: format!("{:?}", t.shape()),
                    })
                }
                None => {
                    return Err(Error::InvalidConfig(format!("missing parameter {name}")))
                }
            }
        }
        Ok(Self {
            config,
            params,
            meta,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    /// Registers every parameter as a graph input.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let ids = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), g.input(t.clone())))
            .collect();
        BoundParams { ids }
    }

    /// Builds the canonical forward pass on `g`.
    ///
    /// `patch01`: [P,P] state patch in normalized depth units;
    /// `shape01`: [2] action shape parameters normalized to [0,1].
    /// Returns the [P,P] normalized delta prediction.
    pub fn build_forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        patch01: NodeId,
        shape01: NodeId,
    ) -> NodeId {
        let cfg = &self.config;
        let act = cfg.nonlinearity;
        let p = cfg.patch_side;

        // state branch: raw patch + physical slopes
        let patch_c1 = g.reshape(patch01, vec![1, p, p]);
        let slope_factor = cfg.d_max_mm / cfg.cell_size_mm;
        let grads = g.grad2d(patch01, slope_factor);
        let mut state = g.concat_channels(&[patch_c1, grads]);
        for i in 0..3 {
            let w = bound.id(&format!("state_conv{i}.w"));
            let b = bound.id(&format!("state_conv{i}.b"));
            state = g.conv2d(state, w, b);
            state = g.activation(state, act);
        }

        // shape branch: 3 linear layers, reshape to 2D, 3 convs, upsample
        let mut shape = shape01;
        for i in 0..3 {
            let w = bound.id(&format!("shape_lin{i}.w"));
            let b = bound.id(&format!("shape_lin{i}.b"));
            shape = g.linear(shape, w, b);
            shape = g.activation(shape, act);
        }
        let grid = cfg.shape_grid;
        let mut shape = g.reshape(shape, vec![1, grid, grid]);
        for i in 0..3 {
            let w = bound.id(&format!("shape_conv{i}.w"));
            let b = bound.id(&format!("shape_conv{i}.b"));
            shape = g.conv2d(shape, w, b);
            shape = g.activation(shape, act);
        }
        let shape_up = g.upsample_bilinear(shape, p, p);

        // fusion: state features + raw state + shape encoding
        let mut fused = g.concat_channels(&[state, patch_c1, shape_up]);
        for i in 0..5 {
            let w = bound.id(&format!("fusion_conv{i}.w"));
            let b = bound.id(&format!("fusion_conv{i}.b"));
            fused = g.conv2d(fused, w, b);
            if i < 4 {
                fused = g.activation(fused, act);
            }
        }
        g.reshape(fused, vec![p, p])
    }

    /// One dynamics step on the graph: warp the state around the pose,
    /// predict the canonical delta, warp it back and add.
    ///
    /// `state01`: [H,W] normalized field; `pose`: [3] (cells, radians);
    /// `shape01`: [2]. Returns the next normalized state.
    pub fn build_step(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        state01: NodeId,
        pose: NodeId,
        shape01: NodeId,
        kind: ActionKind,
    ) -> NodeId {
        let (h, w) = match g.value(state01).shape() {
            [h, w] => (*h, *w),
            other => panic!("state must be [H,W], got {other:?}"),
        };
        let geom = anchor_for(self.config.patch_side, kind);
        let patch = g.warp_to_patch(state01, pose, geom);
        let delta = self.build_forward(g, bound, patch, shape01);
        let delta_field = g.warp_to_field(delta, pose, geom, h, w);
        g.add(state01, delta_field)
    }

    /// Predicts the canonical delta for a patch (mm in, mm out).
    /// `shape01` are the action shape parameters normalized by their maxima.
    pub fn forward_canonical(
        &self,
        patch: &CanonicalPatch,
        shape01: [f64; 2],
    ) -> Result<CanonicalPatch> {
        let p = self.config.patch_side;
        if patch.side() != p {
            return Err(Error::ShapeMismatch {
                expected: format!("patch side {p}"),
                got: format!("{}", patch.side()),
            });
        }
        let d_max = self.config.d_max_mm;
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let vals01: Vec<f64> = patch.values().iter().map(|v| v / d_max).collect();
        let patch_id = g.input(Tensor::new(vec![p, p], vals01)?);
        let shape_id = g.input(Tensor::new(vec![2], shape01.to_vec())?);
        let out = self.build_forward(&mut g, &bound, patch_id, shape_id);
        let delta_mm: Vec<f64> = g.value(out).data().iter().map(|v| v * d_max).collect();
        if delta_mm.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward_canonical output".into()));
        }
        CanonicalPatch::new(p, patch.cell_size(), delta_mm)
    }

    /// Full-field prediction: `state + from_canonical(f(to_canonical(state)))`.
    pub fn predict(
        &self,
        state: &HeightField,
        action: &Action,
        bounds: &ActionBounds,
    ) -> Result<HeightField> {
        self.check_geometry(state)?;
        action.validate(bounds)?;
        let d_max = state.d_max();
        let (h, w) = (state.height(), state.width());
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let state01: Vec<f64> = state.depths().iter().map(|v| v / d_max).collect();
        let state_id = g.input(Tensor::new(vec![h, w], state01)?);
        let pose = action.pose(state);
        let pose_id = g.input(Tensor::new(
            vec![3],
            vec![pose.start_x, pose.start_y, pose.theta],
        )?);
        let shape_id = g.input(Tensor::new(
            vec![2],
            action.shape_params_normalized(bounds).to_vec(),
        )?);
        let next = self.build_step(&mut g, &bound, state_id, pose_id, shape_id, action.kind());
        let depths: Vec<f64> = g.value(next).data().iter().map(|v| v * d_max).collect();
        HeightField::from_raw(w, h, state.cell_size(), d_max, depths)
    }

    pub(crate) fn check_geometry(&self, field: &HeightField) -> Result<()> {
        let cfg = &self.config;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * b.abs().max(1.0);
        if !close(field.d_max(), cfg.d_max_mm) || !close(field.cell_size(), cfg.cell_size_mm) {
            return Err(Error::InvalidConfig(format!(
                "field geometry (d_max {}, cell {}) does not match model normalization ({}, {})",
                field.d_max(),
                field.cell_size(),
                cfg.d_max_mm,
                cfg.cell_size_mm
            )));
        }
        Ok(())
    }
}

/// Parameter-name to graph-node mapping for one bound graph.
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> NodeId {
        self.ids[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            patch_side: 16,
            state_channels: [2, 3, 3],
            shape_hidden: [4, 8, 16],
            shape_grid: 4,
            shape_channels: [2, 2, 2],
            fusion_channels: [3, 3, 3, 3, 1],
            kernels: [3, 3, 3],
            nonlinearity: Nonlinearity::Silu,
            init_seed: 7,
            d_max_mm: 80.0,
            cell_size_mm: 2.0,
        }
    }

    #[test]
    fn zero_initialized_head_predicts_zero_delta() {
        let model = DynamicsModel::new(tiny_config()).unwrap();
        let patch = CanonicalPatch::new(16, 2.0, vec![35.0; 256]).unwrap();
        let delta = model.forward_canonical(&patch, [0.5, 0.7]).unwrap();
        assert!(delta.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut model = DynamicsModel::new(tiny_config()).unwrap();
        // give the head nonzero weights
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (name, t) in model.params_mut() {
            if name.starts_with("fusion_conv4") {
                for v in t.data_mut() {
                    *v = rng.gen_range(-0.1..0.1);
                }
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f64> = (0..256).map(|_| rng.gen_range(20.0..60.0)).collect();
        let patch = CanonicalPatch::new(16, 2.0, vals).unwrap();
        let d1 = model.forward_canonical(&patch, [0.3, 0.6]).unwrap();
        let d2 = model.forward_canonical(&patch, [0.3, 0.6]).unwrap();
        assert_eq!(d1.values(), d2.values());
        // and sensitive to the shape params
        let d3 = model.forward_canonical(&patch, [0.9, 0.6]).unwrap();
        assert_ne!(d1.values(), d3.values());
    }

    #[test]
    fn config_validation_rejects_bad_topology() {
        let mut c = tiny_config();
        c.shape_grid = 5; // 25 != 16
        assert!(DynamicsModel::new(c).is_err());
        let mut c = tiny_config();
        c.fusion_channels[4] = 2;
        assert!(DynamicsModel::new(c).is_err());
        let mut c = tiny_config();
        c.kernels[0] = 4;
        assert!(DynamicsModel::new(c).is_err());
    }

    #[test]
    fn predict_with_zero_head_returns_state() {
        let model = DynamicsModel::new(tiny_config()).unwrap();
        let state = HeightField::flat(24, 24, 2.0, 80.0, 40.0).unwrap();
        let action = Action::Push(crate::field::PushAction {
            x: 0.5,
            y: 0.5,
            theta: 1.0,
            length_mm: 20.0,
            depth_mm: 4.0,
        });
        let bounds = ActionBounds::default();
        let out = model.predict(&state, &action, &bounds).unwrap();
        for (a, b) in out.depths().iter().zip(state.depths()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_invariance_of_canonical_prediction() {
        // same (l, z), different (x, y, theta): canonical deltas identical
        let mut model = DynamicsModel::new(tiny_config()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for (name, t) in model.params_mut() {
            if name.starts_with("fusion_conv4") {
                for v in t.data_mut() {
                    *v = rng.gen_range(-0.05..0.05);
                }
            }
        }
        let patch_vals: Vec<f64> = (0..256).map(|_| rng.gen_range(30.0..50.0)).collect();
        let patch = CanonicalPatch::new(16, 2.0, patch_vals).unwrap();
        // (x, y, theta) never reach the canonical forward pass
        let d1 = model.forward_canonical(&patch, [0.4, 0.8]).unwrap();
        let d2 = model.forward_canonical(&patch, [0.4, 0.8]).unwrap();
        assert_eq!(d1.values(), d2.values());
    }
}
