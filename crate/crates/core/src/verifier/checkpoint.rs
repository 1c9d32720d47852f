use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::capsule::MarginConfig;
use super::config::VerifierConfig;
use super::model::Verifier;
use super::train::TrainingLog;
use crate::error::{Error, Result};
use crate::params::{AdamState, ParamRecord};

pub const VERIFIER_FORMAT_VERSION: u32 = 1;

/// Self-describing verifier checkpoint: config echo, vocabulary hash, label
/// names, parameter arrays and (optionally) optimizer state for resuming.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifierCheckpoint {
    pub format_version: u32,
    pub config: VerifierConfig,
    pub margin: MarginConfig,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub labels: Vec<String>,
    pub epochs_completed: usize,
    pub log: TrainingLog,
    pub param_hash: String,
    pub params: Vec<ParamRecord>,
    pub optimizer: Option<AdamState>,
}

impl VerifierCheckpoint {
    pub fn from_verifier(
        v: &Verifier,
        vocab_hash: &str,
        labels: &[String],
        epochs_completed: usize,
        log: TrainingLog,
        optimizer: Option<AdamState>,
    ) -> Self {
        Self {
            format_version: VERIFIER_FORMAT_VERSION,
            config: v.config.clone(),
            margin: v.margin,
            vocab_size: v.vocab_size,
            vocab_hash: vocab_hash.to_string(),
            labels: labels.to_vec(),
            epochs_completed,
            log,
            param_hash: v.param_hash(),
            params: v.store.to_records(),
            optimizer,
        }
    }

    /// Rebuild the model, checking the stored parameter hash.
    pub fn to_verifier(&self) -> Result<Verifier> {
        self.config.validate()?;
        let mut v = Verifier::new(self.config.clone(), self.vocab_size, 0);
        v.margin = self.margin;
        v.store.load_records(&self.params)?;
        if v.param_hash() != self.param_hash {
            return Err(Error::Checkpoint("parameter hash does not match stored arrays".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format_version != VERIFIER_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported verifier format version {} (expected {VERIFIER_FORMAT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }
}
