//! Shared fixtures for the benchmarks.

use multigran_core::graph_input::{build_graph, generate_synthetic, InputGraph, LabelSet, SyntheticConfig};
use multigran_core::verifier::{Verifier, VerifierConfig};

/// An untrained default-size verifier and `n` synthetic training graphs.
pub fn fixture(n: usize) -> (Verifier, Vec<InputGraph>) {
    let cfg = SyntheticConfig { train_size: n, dev_size: 0, test_size: 0, ..SyntheticConfig::default() };
    let splits = generate_synthetic(&cfg).expect("default synthetic config is valid");
    let verifier = Verifier::new(VerifierConfig::default(), splits.vocab.len(), 0);
    let graphs = splits
        .train
        .iter()
        .map(|i| build_graph(i, &splits.vocab, &LabelSet::default(), verifier.config.max_len).expect("synthetic graph"))
        .collect();
    (verifier, graphs)
}
