//! Metrics, threshold calibration and the positive-ratio ablation sweep.

pub mod ablation;
pub mod metrics;

pub use metrics::{calibrate_threshold, compute_auc, compute_metrics, Calibration, Confusion, MetricsRecord};
pub use ablation::{
    classify_phases, find_effective_ratio, run_ablation, run_ablation_with, test_set_hash, AblationConfig,
    AblationReport, EffectiveRatio, Phase, PhaseBoundary, RatioPoint, RungSummary, DEFAULT_DELTA,
};
