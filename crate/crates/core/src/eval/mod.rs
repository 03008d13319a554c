//! Classification metrics, attribution quality metrics and the studies built on them.

mod metrics;
mod report;
mod studies;

pub use metrics::{
    estimation_errors, min_max_normalize, overlap_top_k, positive_pixel_histogram, random_overlap_baseline, roc_auc,
    ssim, ssim_with, top_k_count, Confusion, Histogram, Roc, RocPoint, SsimOptions,
};
pub use report::{evaluate, ImageRecord, MetricsReport};
pub use studies::{
    export_fp_fn, histogram_study, overlap_study, stability_matrix, stability_study, sweep_decoder_depth,
    sweep_encoder_depth, write_sweep_csv, AttributionMethod, FpFnSummary, OverlapConfig, OverlapReport, OverlapRow,
    StabilityArm, StabilityConfig, StabilityPair, StabilityReport, SweepConfig, SweepRow,
};
