//! Synthetic-scenario generation, the end-to-end pipeline, and the
//! gradient-check harness.

mod gradcheck;
mod pipeline;
mod scenario;

pub use gradcheck::{
    gradcheck_all, gradcheck_with, GradCheckSummary, LossGradCheck, GRAD_EPS, GRAD_TOL,
};
pub use pipeline::{
    active_categories, evaluate_outputs, filter_detections, project_gt, run_pipeline,
    DEFAULT_IOU_THR,
};
pub use scenario::{
    generate_scenario, NoiseConfig, OcclusionWindow, Scenario, ScenarioConfig, EMBED_DIM,
    SCENARIO_SCHEMA,
};
