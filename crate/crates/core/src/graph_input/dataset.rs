use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A claim with its evidence sentences and annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub claim: String,
    pub evidence: Vec<String>,
    pub label: String,
    /// `E_i = 1` when evidence `i` is an annotated rationale sentence.
    pub sentence_rationales: Vec<u8>,
    /// Gold per-token rationale flags, one list per evidence sentence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_rationales: Option<Vec<Vec<u8>>>,
}

impl Instance {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.evidence.is_empty() {
            return Err("`evidence` must contain at least one sentence".into());
        }
        if self.sentence_rationales.len() != self.evidence.len() {
            return Err(format!(
                "`sentence_rationales` has {} entries for {} evidence sentences",
                self.sentence_rationales.len(),
                self.evidence.len()
            ));
        }
        if self.sentence_rationales.iter().any(|&e| e > 1) {
            return Err("`sentence_rationales` entries must be 0 or 1".into());
        }
        if let Some(tokens) = &self.token_rationales {
            if tokens.len() != self.evidence.len() {
                return Err("`token_rationales` must have one list per evidence sentence".into());
            }
            for (i, (flags, text)) in tokens.iter().zip(&self.evidence).enumerate() {
                let n = text.split_whitespace().count();
                if flags.len() != n {
                    return Err(format!("`token_rationales[{i}]` has {} flags for {n} tokens", flags.len()));
                }
                if flags.iter().any(|&f| f > 1) {
                    return Err(format!("`token_rationales[{i}]` entries must be 0 or 1"));
                }
            }
        }
        Ok(())
    }

    /// Stable content id (hex SHA-256 of the canonical JSON line).
    pub fn id(&self) -> String {
        let json = serde_json::to_string(self).expect("instance serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Ordered veracity label names; the index is the class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet(pub Vec<String>);

impl Default for LabelSet {
    fn default() -> Self {
        LabelSet(vec![super::SUPPORTED.to_string(), super::REFUTED.to_string()])
    }
}

impl LabelSet {
    pub fn index(&self, label: &str) -> Option<usize> {
        self.0.iter().position(|l| l == label)
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.0[idx]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn save_dataset(dataset: &[Instance], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for inst in dataset {
        serde_json::to_writer(&mut buf, inst)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Read a JSONL dataset. Blank lines are skipped; line numbers in errors are
/// 1-based.
pub fn load_dataset(path: &Path) -> Result<Vec<Instance>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance =
            serde_json::from_str(&line).map_err(|e| Error::Schema { line: i + 1, message: e.to_string() })?;
        inst.validate().map_err(|message| Error::Schema { line: i + 1, message })?;
        out.push(inst);
    }
    Ok(out)
}
