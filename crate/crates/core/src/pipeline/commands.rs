use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{suffix, RunConfig};
use super::render::{render_html, render_terminal};
use crate::error::{Error, Result};
use crate::explainers::{prepare, train_explainers, Explainer, ExplainerCheckpoint, ExplainerLog};
use crate::graph_input::{
    build_graph, generate_synthetic, load_dataset, save_dataset, InputGraph, Instance, LabelSet, Vocabulary,
};
use crate::metrics::{build_report, MetricsReport};
use crate::objectives::{Ablation, PseudoLabelCache};
use crate::verifier::{train_verifier, TrainingLog, Verifier, VerifierCheckpoint};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

fn check_split(split: &str) -> Result<()> {
    if SPLITS.contains(&split) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown split `{split}` (expected train, dev or test)")))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Vocabulary and instances of one split from the data directory.
fn load_split(cfg: &RunConfig, split: &str) -> Result<(Vocabulary, Vec<Instance>)> {
    check_split(split)?;
    let dir = cfg.data_dir();
    let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
    let instances = load_dataset(&dir.join(format!("{split}.jsonl")))?;
    Ok((vocab, instances))
}

fn graphs(instances: &[Instance], vocab: &Vocabulary, labels: &LabelSet, max_len: usize) -> Result<Vec<InputGraph>> {
    instances.iter().map(|i| build_graph(i, vocab, labels, max_len)).collect()
}

/// Verifier checkpoint, checked against the dataset vocabulary.
fn load_verifier(cfg: &RunConfig, vocab: &Vocabulary) -> Result<(VerifierCheckpoint, Verifier)> {
    let ck = VerifierCheckpoint::load(&cfg.verifier_path())?;
    if ck.vocab_hash != vocab.hash() {
        return Err(Error::Data(format!(
            "verifier was trained on vocabulary {} but the dataset uses {}",
            ck.vocab_hash,
            vocab.hash()
        )));
    }
    let v = ck.to_verifier()?;
    Ok((ck, v))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerateSummary {
    pub dir: PathBuf,
    pub counts: Vec<(String, usize)>,
}

/// Write the synthetic splits and vocabulary.
pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateSummary> {
    cfg.synthetic.validate()?;
    let s = generate_synthetic(&cfg.synthetic)?;
    let dir = cfg.data_dir();
    create_dir(&dir)?;
    let mut counts = Vec::new();
    for (name, split) in SPLITS.iter().zip([&s.train, &s.dev, &s.test]) {
        save_dataset(split, &dir.join(format!("{name}.jsonl")))?;
        counts.push((name.to_string(), split.len()));
    }
    s.vocab.save(&dir.join("vocab.json"))?;
    Ok(GenerateSummary { dir, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifierSummary {
    pub checkpoint: PathBuf,
    pub log: TrainingLog,
    pub dev_accuracy: f64,
    pub param_hash: String,
}

/// Train the verifier, or continue the saved run when `resume` is set.
pub fn cmd_train_verifier(cfg: &RunConfig, resume: bool) -> Result<VerifierSummary> {
    cfg.validate()?;
    let (vocab, train) = load_split(cfg, "train")?;
    let (_, dev) = load_split(cfg, "dev")?;
    let previous = if resume { Some(load_verifier(cfg, &vocab)?) } else { None };
    let labels = previous.as_ref().map_or_else(LabelSet::default, |(ck, _)| LabelSet(ck.labels.clone()));
    let max_len = previous.as_ref().map_or(cfg.verifier.max_len, |(ck, _)| ck.config.max_len);
    let train = graphs(&train, &vocab, &labels, max_len)?;
    let dev = graphs(&dev, &vocab, &labels, max_len)?;

    let (mut verifier, start, state, prior) = match previous {
        Some((ck, v)) => (v, ck.epochs_completed, ck.optimizer.clone(), Some(ck)),
        None => (Verifier::new(cfg.verifier.clone(), vocab.len(), cfg.seed), 0, None, None),
    };
    let (run, state) = train_verifier(&mut verifier, &train, &dev, &cfg.verifier_training, start, state.as_ref())?;
    let completed = start + run.epochs.len();
    let log = match prior {
        Some(ck) => {
            let mut epochs = ck.log.epochs.clone();
            epochs.extend(run.epochs.iter().cloned());
            if ck.log.best_dev_accuracy >= run.best_dev_accuracy {
                verifier = ck.to_verifier()?;
                TrainingLog { epochs, ..ck.log }
            } else {
                TrainingLog { epochs, ..run }
            }
        }
        None => run,
    };
    create_dir(&cfg.out)?;
    let path = cfg.verifier_path();
    let ck =
        VerifierCheckpoint::from_verifier(&verifier, &vocab.hash(), &labels.0, completed, log.clone(), Some(state));
    ck.save(&path)?;
    write_json(&cfg.out.join("verifier_log.json"), &log)?;
    Ok(VerifierSummary { checkpoint: path, dev_accuracy: log.best_dev_accuracy, param_hash: ck.param_hash, log })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplainerSummary {
    pub checkpoint: PathBuf,
    pub log: ExplainerLog,
    pub verifier_hash_before: String,
    pub verifier_hash_after: String,
}

/// Fit both explainers against the frozen verifier.
pub fn cmd_train_explainers(cfg: &RunConfig, ablation: Option<Ablation>) -> Result<ExplainerSummary> {
    cfg.validate()?;
    let (vocab, train) = load_split(cfg, "train")?;
    let (ck, verifier) = load_verifier(cfg, &vocab)?;
    let before = verifier.param_hash();
    let n = cfg.explainer_train_size.min(train.len());
    let subset = &train[..n];
    let labels = LabelSet(ck.labels.clone());
    let graphs = graphs(subset, &vocab, &labels, verifier.config.max_len)?;
    let ids: Vec<String> = subset.iter().map(Instance::id).collect();

    let cache_path = cfg.pseudo_label_path();
    let mut cache = PseudoLabelCache::load(&cache_path)?;
    let pseudo = cache.fill(&verifier, &graphs, &ids, vocab.pad_id(), cfg.ig_steps)?;
    cache.save(&cache_path)?;

    let data = prepare(&verifier, &graphs, &pseudo)?;
    let weights = match ablation {
        Some(a) => cfg.weights.ablate(a),
        None => cfg.weights,
    };
    let mut explainer = Explainer::new(cfg.explainer.clone(), verifier.config.d_model, cfg.seed);
    let log = train_explainers(&verifier, &mut explainer, &data, &weights, &cfg.explainer_training)?;
    let after = verifier.param_hash();
    if after != before {
        return Err(Error::Checkpoint("verifier parameters changed during explainer training".into()));
    }
    create_dir(&cfg.out)?;
    let path = cfg.explainer_path(ablation);
    ExplainerCheckpoint::new(&explainer, &before, weights, log.clone()).save(&path)?;
    write_json(&cfg.out.join(format!("explainer_log{}.json", suffix(ablation))), &log)?;
    Ok(ExplainerSummary { checkpoint: path, log, verifier_hash_before: before, verifier_hash_after: after })
}

/// Both checkpoints plus the graphs of one split.
struct Loaded {
    verifier: Verifier,
    explainer: Explainer,
    labels: LabelSet,
    instances: Vec<Instance>,
    graphs: Vec<InputGraph>,
}

fn load_models(cfg: &RunConfig, split: &str, ablation: Option<Ablation>, input: Option<&Path>) -> Result<Loaded> {
    let (vocab, split_instances) = load_split(cfg, split)?;
    let instances = match input {
        Some(p) => load_dataset(p)?,
        None => split_instances,
    };
    let (ck, verifier) = load_verifier(cfg, &vocab)?;
    let explainer = ExplainerCheckpoint::load(&cfg.explainer_path(ablation))?.to_explainer(&verifier)?;
    let labels = LabelSet(ck.labels.clone());
    let graphs = graphs(&instances, &vocab, &labels, verifier.config.max_len)?;
    Ok(Loaded { verifier, explainer, labels, instances, graphs })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluateOutput {
    pub report: MetricsReport,
    pub path: PathBuf,
}

fn check_tau(tau: f64) -> Result<f64> {
    if tau > 0.0 && tau < 1.0 {
        Ok(tau)
    } else {
        Err(Error::Config(format!("threshold tau must lie in (0, 1), got {tau}")))
    }
}

/// Score the explainers on a split and write the report JSON.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    split: &str,
    ablation: Option<Ablation>,
    tau: Option<f64>,
) -> Result<EvaluateOutput> {
    cfg.validate()?;
    let tau = check_tau(tau.unwrap_or(cfg.explainer.tau))?;
    let m = load_models(cfg, split, ablation, None)?;
    let refs: Vec<&InputGraph> = m.graphs.iter().collect();
    let ex = m.explainer.explain(&m.verifier, &refs, tau)?;
    let report = build_report(split, &m.graphs, &ex, m.labels.len(), tau, cfg.epsilon)?;
    create_dir(&cfg.out)?;
    let path = cfg.out.join(format!("metrics-{split}{}.json", suffix(ablation)));
    fs::write(&path, report.to_json() + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(EvaluateOutput { report, path })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainOutput {
    pub html_path: PathBuf,
    pub terminal: String,
    /// Instances whose sentence rationale came out empty.
    pub empty: usize,
}

/// Render rationales for a JSONL file of instances (or the first `limit`
/// instances of `split`) as HTML and plain text.
pub fn cmd_explain(
    cfg: &RunConfig,
    split: &str,
    input: Option<&Path>,
    ablation: Option<Ablation>,
    tau: Option<f64>,
    limit: usize,
) -> Result<ExplainOutput> {
    cfg.validate()?;
    let tau = check_tau(tau.unwrap_or(cfg.explainer.tau))?;
    let mut m = load_models(cfg, split, ablation, input)?;
    m.instances.truncate(limit);
    m.graphs.truncate(limit);
    let refs: Vec<&InputGraph> = m.graphs.iter().collect();
    let ex = m.explainer.explain(&m.verifier, &refs, tau)?;
    let html = render_html(&m.instances, &ex, &m.labels);
    let terminal = render_terminal(&m.instances, &ex, &m.labels);
    create_dir(&cfg.out)?;
    let stem = input.map_or_else(
        || split.to_string(),
        |p| p.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned()),
    );
    let html_path = cfg.out.join(format!("explain-{stem}{}.html", suffix(ablation)));
    fs::write(&html_path, html).map_err(|e| Error::io(&html_path, e))?;
    let empty = ex.iter().filter(|e| e.rationale.is_empty()).count();
    Ok(ExplainOutput { html_path, terminal, empty })
}
