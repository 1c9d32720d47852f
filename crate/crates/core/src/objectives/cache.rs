use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ig::{layered_integrated_gradients, TokenPseudoLabels};
use crate::error::{Error, Result};
use crate::graph_input::InputGraph;
use crate::verifier::Verifier;

/// Pseudo-labels keyed by verifier hash, step count and instance id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelCache {
    entries: BTreeMap<String, Vec<Vec<f64>>>,
}

fn key(verifier_hash: &str, steps: usize, instance_id: &str) -> String {
    format!("{verifier_hash}/{steps}/{instance_id}")
}

impl PseudoLabelCache {
    /// A missing file is an empty cache.
    pub fn load(path: &Path) -> Result<Self> {
        match fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, verifier_hash: &str, steps: usize, instance_id: &str) -> Option<TokenPseudoLabels> {
        self.entries.get(&key(verifier_hash, steps, instance_id)).map(|s| TokenPseudoLabels { scores: s.clone() })
    }

    pub fn insert(&mut self, verifier_hash: &str, steps: usize, instance_id: &str, labels: &TokenPseudoLabels) {
        self.entries.insert(key(verifier_hash, steps, instance_id), labels.scores.clone());
    }

    /// Look up or compute pseudo-labels for every graph; `ids[i]` names
    /// `graphs[i]`.
    pub fn fill(
        &mut self,
        verifier: &Verifier,
        graphs: &[InputGraph],
        ids: &[String],
        pad_id: u32,
        steps: usize,
    ) -> Result<Vec<TokenPseudoLabels>> {
        let hash = verifier.param_hash();
        let mut computed = 0;
        let out = graphs
            .iter()
            .zip(ids)
            .map(|(g, id)| match self.get(&hash, steps, id) {
                Some(l) if l.scores.iter().map(Vec::len).eq(g.evidence_spans.iter().map(|s| s.len())) => Ok(l),
                _ => {
                    let l = layered_integrated_gradients(verifier, g, pad_id, steps)?;
                    self.insert(&hash, steps, id, &l);
                    computed += 1;
                    Ok(l)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        log::info!("pseudo-labels: {computed} computed, {} cached", graphs.len() - computed);
        Ok(out)
    }
}
