//! Distance-dependent reliability of object-detection outputs.
//!
//! The pipeline scores each frame by IoU × confidence, fits a penalized
//! B-spline trend of the score over distance, finds variance change points
//! in the residuals, and reports the perception characteristics distance
//! (PCD): the farthest distance at which the score still exceeds a quality
//! threshold with a given probability. mPCD averages PCD over a grid of
//! threshold pairs.

pub mod cli_report;
pub mod data_model;
pub mod error;
pub mod pcd_metric;
pub mod spline_fit;
pub mod synth_oracle;
pub mod variance_changepoint;

pub use data_model::{
    build_series, compute_iou, compute_quality_score, parse_detection_log, BoundingBox,
    DetectionRecord, DistanceSeries, Schema,
};
pub use error::{Error, Result};
pub use pcd_metric::{
    build_segment_model, compute_pcd, compute_pcd_surface, exceedance_probability, mean_pcd,
    mean_quality_score, PcdDomain, PcdSurface, SegmentModel, ThresholdGrid,
};
pub use spline_fit::{
    build_basis, fit_penalized, select_lambda, BoundaryKnots, Criterion, FittedCurve,
    KnotPlacement, SplineConfig,
};
pub use variance_changepoint::{
    critical_threshold, detect_all, detect_single, sic_statistic, split_log_likelihood, Centering,
    ChangePointResult, ChangePointTest, RejectionRule, SigmaMode,
};
