//! Run configuration: one serializable struct wiring field geometry, action
//! bounds, material/tool presets, model, training and planner defaults.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ActionBounds, ActionKind, HeightField};
use crate::nn::{ModelConfig, TrainConfig};
use crate::plan::{GoalWeights, MpcConfig, RefineConfig, RefineMethod};
use crate::sim::{DatasetConfig, MaterialSpec, ToolSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub width: usize,
    pub height: usize,
    pub cell_size_mm: f64,
    pub d_max_mm: f64,
    /// Material thickness of the starting slab.
    pub slab_depth_mm: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        // 12 x 12 inch working surface at 128 x 128 cells
        Self {
            width: 128,
            height: 128,
            cell_size_mm: 304.8 / 128.0,
            d_max_mm: 80.0,
            slab_depth_mm: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub n_actions: usize,
    pub exec_chunk: usize,
    pub trials: usize,
    pub w_3d: f64,
    pub w_viz: f64,
    pub refine_method: RefineMethod,
    pub refine_iters: usize,
    pub gd_lr: f64,
    pub cem_population: usize,
    pub cem_elite_frac: f64,
    pub cem_sigma: f64,
    pub reinit_on_replan: bool,
    pub goal_weights: GoalWeights,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            n_actions: 40,
            exec_chunk: 5,
            trials: 64,
            w_3d: 1.0,
            w_viz: 1.0,
            refine_method: RefineMethod::Gd,
            refine_iters: 100,
            gd_lr: 0.02,
            cem_population: 32,
            cem_elite_frac: 0.25,
            cem_sigma: 0.1,
            reinit_on_replan: false,
            goal_weights: GoalWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub field: FieldConfig,
    pub bounds: ActionBounds,
    pub material: MaterialSpec,
    pub tool: ToolSpec,
    pub reset_period: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub planner: PlannerConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let field = FieldConfig::default();
        let model = ModelConfig {
            d_max_mm: field.d_max_mm,
            cell_size_mm: field.cell_size_mm,
            ..ModelConfig::default()
        };
        Self {
            field,
            bounds: ActionBounds::default(),
            material: MaterialSpec::foam(),
            tool: ToolSpec::rod(8.0, 0.2, crate::sim::ToolMode::SingleTip),
            reset_period: 25,
            model,
            train: TrainConfig::default(),
            planner: PlannerConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.field.width == 0
            || self.field.height == 0
            || !(self.field.cell_size_mm > 0.0)
            || !(self.field.d_max_mm > 0.0)
        {
            return Err(Error::InvalidConfig("non-positive field geometry".into()));
        }
        if !(0.0..=self.field.d_max_mm).contains(&self.field.slab_depth_mm) {
            return Err(Error::InvalidConfig(
                "slab depth must lie in [0, d_max]".into(),
            ));
        }
        self.bounds.validate()?;
        self.material.validate()?;
        self.tool.build()?;
        self.model.validate()?;
        if self.reset_period == 0 {
            return Err(Error::InvalidConfig("reset_period must be >= 1".into()));
        }
        if self.planner.n_actions == 0 || self.planner.exec_chunk == 0 {
            return Err(Error::InvalidConfig(
                "planner needs n_actions >= 1 and exec_chunk >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Copies the field normalization into the model config; the two must
    /// agree for warps and losses to line up.
    pub fn harmonized(mut self) -> Self {
        self.model.d_max_mm = self.field.d_max_mm;
        self.model.cell_size_mm = self.field.cell_size_mm;
        self
    }

    /// The flat starting slab.
    pub fn initial_field(&self) -> Result<HeightField> {
        HeightField::flat(
            self.field.width,
            self.field.height,
            self.field.cell_size_mm,
            self.field.d_max_mm,
            self.field.d_max_mm - self.field.slab_depth_mm,
        )
    }

    pub fn dataset_config(&self, kind: ActionKind) -> DatasetConfig {
        DatasetConfig {
            patch_side: self.model.patch_side,
            reset_period: self.reset_period,
            bounds: self.bounds,
            kind,
        }
    }

    pub fn refine_config(&self, seed: u64) -> RefineConfig {
        RefineConfig {
            method: self.planner.refine_method,
            iters: self.planner.refine_iters,
            gd_lr: self.planner.gd_lr,
            cem_population: self.planner.cem_population,
            cem_elite_frac: self.planner.cem_elite_frac,
            cem_sigma: self.planner.cem_sigma,
            seed,
        }
    }

    pub fn mpc_config(&self, kind: ActionKind) -> MpcConfig {
        MpcConfig {
            n_actions: self.planner.n_actions,
            exec_chunk: self.planner.exec_chunk,
            w_3d: self.planner.w_3d,
            w_viz: self.planner.w_viz,
            trials: self.planner.trials,
            refine: self.refine_config(self.seed),
            reinit_on_replan: self.planner.reinit_on_replan,
            kind,
            bounds: self.bounds,
            seed: self.seed,
            patches_dir: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let config = RunConfig::default();
        config.validate().unwrap();
        let json = serde_json::to_string_pretty(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(config, back);
        let json2 = serde_json::to_string_pretty(&back).unwrap();
        assert_eq!(json, json2);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = RunConfig::default();
        c.field.slab_depth_mm = 200.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.bounds.l_max_mm = -1.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.material.plasticity = 2.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn initial_field_matches_geometry() {
        let config = RunConfig::default();
        let f = config.initial_field().unwrap();
        assert_eq!(f.width(), 128);
        assert_eq!(f.at(0, 0), 40.0);
        assert!((f.extent_mm().0 - 304.8).abs() < 1e-9);
    }
}
