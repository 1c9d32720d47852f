//! Tokenization, evidence-graph construction, dataset I/O and the synthetic
//! multi-hop generator.

mod dataset;
mod graph;
mod synthetic;
mod vocab;

pub use dataset::{load_dataset, save_dataset, Instance, LabelSet};
pub use graph::{build_graph, InputGraph};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticSplits, REFUTED, SUPPORTED};
pub use vocab::{tokenize, Vocabulary, CLS, PAD, SEP, UNK};
