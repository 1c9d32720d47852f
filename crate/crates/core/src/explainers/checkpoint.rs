use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Explainer, ExplainerConfig};
use super::train::ExplainerLog;
use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::params::ParamRecord;
use crate::verifier::Verifier;

pub const EXPLAINER_FORMAT_VERSION: u32 = 1;

/// Explainer parameters bound to the hash of the verifier they explain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainerCheckpoint {
    pub format_version: u32,
    pub verifier_hash: String,
    pub config: ExplainerConfig,
    pub weights: LossWeights,
    pub d_model: usize,
    pub log: ExplainerLog,
    pub param_hash: String,
    pub params: Vec<ParamRecord>,
}

impl ExplainerCheckpoint {
    pub fn new(explainer: &Explainer, verifier_hash: &str, weights: LossWeights, log: ExplainerLog) -> Self {
        Self {
            format_version: EXPLAINER_FORMAT_VERSION,
            verifier_hash: verifier_hash.to_string(),
            config: explainer.config.clone(),
            weights,
            d_model: explainer.d_model,
            log,
            param_hash: explainer.param_hash(),
            params: explainer.store.to_records(),
        }
    }

    /// Rebuild the explainer; fails unless `verifier` is the one it was
    /// trained against.
    pub fn to_explainer(&self, verifier: &Verifier) -> Result<Explainer> {
        let actual = verifier.param_hash();
        if actual != self.verifier_hash {
            return Err(Error::Checkpoint(format!(
                "explainer was trained against verifier {}, not {actual}",
                self.verifier_hash
            )));
        }
        self.config.validate()?;
        let mut e = Explainer::new(self.config.clone(), self.d_model, 0);
        e.store.load_records(&self.params)?;
        if e.param_hash() != self.param_hash {
            return Err(Error::Checkpoint("explainer parameter hash does not match stored arrays".into()));
        }
        Ok(e)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format_version != EXPLAINER_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported explainer format version {} (expected {EXPLAINER_FORMAT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }
}
