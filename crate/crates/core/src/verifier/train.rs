use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layout::BatchLayout;
use super::model::{LayerMasks, Verifier};
use crate::error::{Error, Result};
use crate::graph_input::InputGraph;
use crate::params::{collect_grads, Adam, AdamConfig, AdamState};
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop once dev accuracy reaches this value.
    pub target_dev_accuracy: Option<f64>,
    pub seed: u64,
    /// Fraction of training graphs seen as an erased view.
    pub erasure_rate: f64,
    /// Drop probability of each non-rationale sentence and token in a view.
    pub erasure_drop: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            target_dev_accuracy: Some(0.99),
            seed: 0,
            erasure_rate: 0.5,
            erasure_drop: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
}

/// Masks that erase annotated non-rationale sentences and tokens at random,
/// leaving the label valid. Gates reach every hop like explainer masks do.
pub fn erasure_view<R: Rng>(graph: &InputGraph, drop: f64, layers: usize, rng: &mut R) -> LayerMasks {
    let sentence: Vec<f64> =
        graph.sentence_labels.iter().map(|&e| if e == 0 && rng.gen_bool(drop) { 0.0 } else { 1.0 }).collect();
    let token: Vec<Vec<f64>> = match &graph.token_labels {
        Some(flags) => flags
            .iter()
            .map(|row| row.iter().map(|&t| if t == 0 && rng.gen_bool(drop) { 0.0 } else { 1.0 }).collect())
            .collect(),
        None => graph.evidence_spans.iter().map(|s| vec![1.0; s.len()]).collect(),
    };
    let hidden = Some(vec![(token.clone(), sentence.clone()); layers]);
    LayerMasks { token, sentence, hidden }
}

pub fn accuracy(v: &Verifier, graphs: &[InputGraph]) -> f64 {
    if graphs.is_empty() {
        return 0.0;
    }
    let refs: Vec<&InputGraph> = graphs.iter().collect();
    let preds = v.predict_batch(&refs);
    let hits = preds.iter().zip(graphs).filter(|(p, g)| p.label == g.label).count();
    hits as f64 / graphs.len() as f64
}

/// Train with the capsule margin loss, keeping the parameters of the best dev
/// epoch. Epoch numbers continue from `start_epoch` so resumed runs extend
/// the same log.
pub fn train_verifier(
    verifier: &mut Verifier,
    train: &[InputGraph],
    dev: &[InputGraph],
    cfg: &TrainConfig,
    start_epoch: usize,
    resume: Option<&AdamState>,
) -> Result<(TrainingLog, AdamState)> {
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    for (name, p) in [("erasure_rate", cfg.erasure_rate), ("erasure_drop", cfg.erasure_drop)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
        }
    }
    let layers = verifier.config.layers;
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }, &verifier.store);
    if let Some(state) = resume {
        opt.restore(state)?;
    }
    let mut log = TrainingLog { best_dev_accuracy: f64::NEG_INFINITY, ..Default::default() };
    let mut best_store = verifier.store.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in start_epoch + 1..=start_epoch + cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let graphs: Vec<&InputGraph> = batch.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = graphs.iter().map(|g| g.label).collect();
            let layout = BatchLayout::new(&graphs);
            let mut tape = Tape::new();
            let bound = verifier.store.bind(&mut tape, true);
            let masks = (cfg.erasure_rate > 0.0).then(|| {
                let views: Vec<LayerMasks> = graphs
                    .iter()
                    .map(|g| {
                        if rng.gen_bool(cfg.erasure_rate) {
                            erasure_view(g, cfg.erasure_drop, layers, &mut rng)
                        } else {
                            LayerMasks::identity(g, layers, true)
                        }
                    })
                    .collect();
                let refs: Vec<&LayerMasks> = views.iter().collect();
                LayerMasks::to_vars(&mut tape, &refs)
            });
            let out = verifier.forward(&mut tape, &bound, &layout, masks.as_ref(), Some(&mut rng));
            let loss = verifier.loss(&mut tape, &out, &labels);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite { component: format!("capsule margin loss (epoch {epoch})") });
            }
            total += value * batch.len() as f64;
            let grads = tape.backward(loss);
            let g = collect_grads(&verifier.store, &bound, &grads);
            if g.iter().any(|m| m.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite { component: format!("verifier gradient (epoch {epoch})") });
            }
            opt.update(&mut verifier.store, &g);
        }
        let train_loss = total / train.len() as f64;
        let dev_accuracy = accuracy(verifier, dev);
        log::info!(
            "verifier epoch {epoch}: loss {train_loss:.4} dev acc {dev_accuracy:.4} ({:.1}s)",
            started.elapsed().as_secs_f64()
        );
        log.epochs.push(EpochRecord { epoch, train_loss, dev_accuracy });
        if dev_accuracy > log.best_dev_accuracy {
            log.best_dev_accuracy = dev_accuracy;
            log.best_epoch = epoch;
            best_store = verifier.store.clone();
        }
        if cfg.target_dev_accuracy.is_some_and(|t| dev_accuracy >= t) {
            break;
        }
    }
    let state = opt.state(&verifier.store);
    verifier.store = best_store;
    Ok((log, state))
}
