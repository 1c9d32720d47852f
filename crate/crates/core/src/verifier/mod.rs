//! The frozen veracity model: per-node transformer blocks interleaved with
//! graph attention over the `[CLS]` rows, aggregated by a capsule layer with
//! dynamic routing.

mod capsule;
mod checkpoint;
mod config;
mod gat;
mod layout;
mod model;
mod train;

pub use capsule::{capsule_routing, margin_loss, squash, CapsuleOutput, CapsuleVars, MarginConfig};
pub use checkpoint::{VerifierCheckpoint, VERIFIER_FORMAT_VERSION};
pub use config::VerifierConfig;
pub use gat::{gat_layer, AdjacencyVars};
pub use layout::{BatchLayout, GraphSlot};
pub use model::{argmax, ForwardOut, HiddenStack, LayerGates, LayerMasks, MaskVars, Prediction, Verifier};
pub use train::{accuracy, erasure_view, train_verifier, EpochRecord, TrainConfig, TrainingLog};

#[cfg(test)]
pub(crate) use model::tests::tiny_config;
