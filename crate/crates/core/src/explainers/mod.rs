//! Token and sentence explainers producing Hard Concrete gates over a frozen
//! verifier, and the perturbed graphs and rationales built from them.

mod checkpoint;
mod hard_concrete;
mod model;
mod train;

pub use checkpoint::{ExplainerCheckpoint, EXPLAINER_FORMAT_VERSION};
pub use hard_concrete::{hard_concrete_sample, hard_concrete_tape, prob_nonzero_tape, HardConcreteParams};
pub use model::{
    apply_masks, infer_rationales, BatchFeatures, Explainer, ExplainerConfig, Explanation, GateNoise, GateVars,
    MaskMode, MaskPair, PerturbedGraph, RationaleSet, SentenceGates, TokenGates,
};
pub use train::{
    loss_graph, prepare, train_explainers, ExplainerEpoch, ExplainerLog, ExplainerTrainConfig, LossVars, PreparedGraph,
};
