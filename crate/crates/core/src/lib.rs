//! Token and sentence rationale extraction for graph-based claim verification:
//! a capsule-aggregated graph transformer verifier, Hard Concrete token and
//! sentence explainers trained against it, and overlap/faithfulness metrics.

pub mod error;
pub mod explainers;
pub mod graph_input;
pub mod metrics;
pub mod objectives;
pub mod params;
pub mod pipeline;
pub mod tape;
pub mod verifier;

pub use error::{Error, Result};
