//! Displacement metrics in squared pixels and pixels, best-of-L evaluation,
//! and embedding cluster quality.

mod displacement;
mod report;
mod silhouette;

pub use displacement::{ade_px, ade_sq, all_metrics, c_ade_sq, c_fde_sq, fde_px, fde_sq, pixel_variants};
pub use report::{
    endpoint_spread, evaluate, horizon_frames, horizon_label, predict_windows, score, HorizonMetrics,
    MetricsReport, PredictionMode, WindowPredictions, METRIC_NAMES,
};
pub use silhouette::silhouette_score;
