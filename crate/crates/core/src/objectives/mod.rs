//! Explainer training objectives and the token pseudo-labels they use.

mod cache;
mod ig;
mod losses;

pub use cache::PseudoLabelCache;
pub use ig::{
    embedding_attributions, integrated_gradients, layered_integrated_gradients, path_points, IgResult,
    TokenPseudoLabels,
};
pub use losses::{
    consistency_loss, consistency_tape, fidelity_loss, fidelity_tape, jsd, l0_loss, l0_tape, salience_sentence_loss,
    salience_sentence_tape, salience_token_loss, salience_token_tape, total_loss, Ablation, Groups, LossComponents,
    LossWeights, COMPONENT_NAMES,
};
