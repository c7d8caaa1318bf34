//! Experiment orchestration: metrics, evaluation of trained models and the
//! baseline, ablations, subnetwork importance and the acceptance checks.

pub mod acceptance;
mod eval;
mod experiment;
mod metrics;

pub use eval::{
    all_representations, ct_multi_step, ct_one_step, fit_msm_baseline, fit_scalers, model_inputs,
    msm_horizons, msm_patients, probe_accuracy, scale_trajectory, simulator_dims, train_ct,
    Horizon, ProbeScore,
};
pub use experiment::{
    evaluate_checkpoint, run_ablations, run_experiment, subnetwork_importance, Ablation,
    ExperimentOutput, ExperimentSpec, Importance, Method, CHECKPOINT_FILE, METRICS_FILE, MSM_FILE,
    TRAIN_LOG_FILE,
};
pub use metrics::{
    append_metrics, mean_se, normalized_rmse, read_manifest, read_metrics, MetricsRecord,
};
