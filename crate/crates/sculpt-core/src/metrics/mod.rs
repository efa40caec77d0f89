//! Point-cloud and image-space evaluation metrics plus the experiment
//! harnesses: cross-material transfer, sample efficiency, noise
//! sensitivity, and CSV/PNG emission.

mod distance;
mod eval;
mod raster;
mod sweeps;

pub use distance::{
    chamfer, emd, emd_exact, emd_greedy_2opt, EmdResult, EMD_EXACT_LIMIT, EMD_MAX_POINTS,
};
pub use eval::{eval_model, eval_predictor, zero_delta_baseline, MetricReport};
pub use raster::{write_curves_png, write_field_png, write_heatmap_png};
pub use sweeps::{
    cross_material_matrix, noise_sweep, sample_efficiency_sweep, CrossMaterialResult,
    ExperimentContext, NoiseSweepResult, SampleEfficiencyResult,
};
