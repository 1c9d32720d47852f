use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explainers::{ExplainerConfig, ExplainerTrainConfig};
use crate::graph_input::SyntheticConfig;
use crate::objectives::{Ablation, LossWeights};
use crate::verifier::{TrainConfig, VerifierConfig};

/// Everything one run needs, loaded from a JSON file. Missing fields take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synthetic: SyntheticConfig,
    /// Directory holding `train.jsonl`, `dev.jsonl`, `test.jsonl` and
    /// `vocab.json`; defaults to `<out>/data`.
    pub data_dir: Option<PathBuf>,
    pub verifier: VerifierConfig,
    pub verifier_training: TrainConfig,
    pub explainer: ExplainerConfig,
    pub weights: LossWeights,
    pub explainer_training: ExplainerTrainConfig,
    /// Riemann steps for the token pseudo-labels.
    pub ig_steps: usize,
    /// Leading training instances used to fit the explainers.
    pub explainer_train_size: usize,
    /// Token budget of the consistency audit.
    pub epsilon: usize,
    /// Seeds model initialization and both training loops.
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            data_dir: None,
            verifier: VerifierConfig::default(),
            verifier_training: TrainConfig::default(),
            explainer: ExplainerConfig::default(),
            // tuned on the synthetic task
            weights: LossWeights { l0: 0.0002, ..LossWeights::default() },
            explainer_training: ExplainerTrainConfig::default(),
            ig_steps: 32,
            explainer_train_size: 300,
            epsilon: 6,
            seed: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.verifier.validate()?;
        self.explainer.validate()?;
        self.weights.validate()?;
        if self.ig_steps < 16 {
            return Err(Error::Config(format!("ig_steps must be at least 16, got {}", self.ig_steps)));
        }
        if self.explainer_train_size == 0 {
            return Err(Error::Config("explainer_train_size must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.verifier_training.seed = seed;
        self.explainer_training.seed = seed;
        self
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn verifier_path(&self) -> PathBuf {
        self.out.join("verifier.json")
    }

    pub fn explainer_path(&self, ablation: Option<Ablation>) -> PathBuf {
        self.out.join(format!("explainer{}.json", suffix(ablation)))
    }

    pub fn pseudo_label_path(&self) -> PathBuf {
        self.data_dir().join("pseudo_labels.json")
    }
}

/// File-name suffix of an ablated run.
pub fn suffix(ablation: Option<Ablation>) -> &'static str {
    match ablation {
        None => "",
        Some(Ablation::C) => "-no-c",
        Some(Ablation::SS) => "-no-ss",
        Some(Ablation::ST) => "-no-st",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 4, "synthetic": {"train_size": 10}}"#).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.synthetic.train_size, 10);
        assert_eq!(cfg.synthetic.dev_size, SyntheticConfig::default().dev_size);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 4}"#).is_err());
    }

    #[test]
    fn seed_reaches_both_training_loops() {
        let cfg = RunConfig::default().with_seed(9);
        assert_eq!((cfg.verifier_training.seed, cfg.explainer_training.seed), (9, 9));
    }

    #[test]
    fn tau_is_validated() {
        let mut cfg = RunConfig::default();
        cfg.explainer.tau = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
