//! Overlap-consistency, fidelity, classification and rationale agreement
//! scores.

mod overlap;
mod report;
mod scores;
mod sum;

pub use overlap::{instance_overlap, tro, InstanceOverlap, InstanceSelection, OverlapReport};
pub use report::{build_report, render_table, MetricsReport};
pub use scores::{
    average_ranks, classification_metrics, fidelity_metric, mean_fidelity, prf, sentence_rationale_prf, spearman,
    token_agreement, Classification, Prf, TokenAgreement,
};
pub use sum::{compensated_sum, mean};
