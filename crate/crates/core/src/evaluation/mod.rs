//! Overlap metrics, paired significance tests and run reports.

pub mod metrics;
pub mod report;
pub mod wilcoxon;

pub use metrics::{dsc, iou, ImageScore, Overlap};
pub use report::{
    build_report, emit_report, evaluate_run, scored_records, scores_csv, write_overlays, Metric, PairwiseTest,
    Report, RunEvaluation, RunSummary, REPORT_JSON,
};
pub use wilcoxon::{wilcoxon_signed_rank, PairedTestResult, TestMethod};
