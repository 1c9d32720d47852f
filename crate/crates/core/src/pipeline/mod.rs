//! Stage-wise orchestration: data generation, verifier training, explainer
//! training against the frozen verifier, evaluation and rationale reports.

mod commands;
mod config;
mod render;

pub use commands::{
    cmd_evaluate, cmd_explain, cmd_generate, cmd_train_explainers, cmd_train_verifier, EvaluateOutput, ExplainOutput,
    ExplainerSummary, GenerateSummary, VerifierSummary, SPLITS,
};
pub use config::{suffix, RunConfig};
pub use render::{render_html, render_terminal};
