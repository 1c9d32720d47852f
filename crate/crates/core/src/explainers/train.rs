use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{BatchFeatures, Explainer, GateNoise, GateVars};
use crate::error::{Error, Result};
use crate::graph_input::InputGraph;
use crate::objectives::{
    consistency_tape, fidelity_tape, l0_tape, salience_sentence_tape, salience_token_tape, Groups, LossComponents,
    LossWeights, TokenPseudoLabels,
};
use crate::params::{collect_grads, Adam, AdamConfig, Bound};
use crate::tape::{Mat, Tape, Var};
use crate::verifier::{BatchLayout, HiddenStack, Verifier};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ExplainerTrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 16, lr: 1e-2, seed: 0 }
    }
}

/// Frozen-verifier quantities of one training graph.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub graph: InputGraph,
    pub hidden: HiddenStack,
    /// `f(G)`
    pub full: Vec<f64>,
    /// Normalized pseudo-labels per evidence row.
    pub s_hat: Vec<f64>,
    pub gold_sentences: Vec<f64>,
}

pub fn prepare(verifier: &Verifier, graphs: &[InputGraph], labels: &[TokenPseudoLabels]) -> Result<Vec<PreparedGraph>> {
    if graphs.len() != labels.len() {
        return Err(Error::Shape("one pseudo-label set per graph required".into()));
    }
    let refs: Vec<&InputGraph> = graphs.iter().collect();
    let encoded = verifier.run(&refs, None)?;
    Ok(encoded
        .into_iter()
        .zip(graphs)
        .zip(labels)
        .map(|((enc, g), l)| PreparedGraph {
            graph: g.clone(),
            hidden: enc.0,
            full: enc.1.class_lengths,
            s_hat: l.normalized().concat(),
            gold_sentences: g.sentence_labels.iter().map(|&e| f64::from(e)).collect(),
        })
        .collect())
}

/// Loss terms of one batch on the tape.
pub struct LossVars {
    pub gates: GateVars,
    /// Fidelity, consistency, sentence salience, token salience, L0.
    pub components: [Var; 5],
    /// Weighted sum over the terms with non-zero weight.
    pub total: Var,
}

/// Build the objective for a batch: gates from the explainer, `f(G_R)` from
/// the verifier bound as constants, and the five loss terms.
pub fn loss_graph(
    tape: &mut Tape,
    verifier: &Verifier,
    explainer: &Explainer,
    pe: &Bound,
    batch: &[&PreparedGraph],
    noise: Option<&GateNoise>,
    weights: &LossWeights,
) -> LossVars {
    let graphs: Vec<&InputGraph> = batch.iter().map(|p| &p.graph).collect();
    let stacks: Vec<&HiddenStack> = batch.iter().map(|p| &p.hidden).collect();
    let f = BatchFeatures::new(&stacks, &graphs);
    let gates = explainer.gates(tape, pe, &f, noise);
    let masks = explainer.mask_vars(tape, &gates);
    let layout = BatchLayout::new(&graphs);
    let pv = verifier.store.bind(tape, false);
    let out = verifier.forward(tape, &pv, &layout, Some(&masks), None);

    let c = verifier.config.num_classes;
    let full = Mat::from_shape_vec((batch.len(), c), batch.iter().flat_map(|p| p.full.clone()).collect())
        .expect("class lengths");
    let full = tape.constant(full);
    let groups = Groups::new(&graphs);
    let gold: Vec<f64> = batch.iter().flat_map(|p| p.gold_sentences.clone()).collect();
    let s_hat: Vec<f64> = batch.iter().flat_map(|p| p.s_hat.clone()).collect();

    let components = [
        fidelity_tape(tape, full, out.lengths),
        consistency_tape(tape, gates.pt, gates.ps, &groups),
        salience_sentence_tape(tape, gates.ps, &gold, &groups),
        salience_token_tape(tape, gates.pt, &s_hat, &groups),
        l0_tape(tape, gates.pt, &groups),
    ];
    let mut total = tape.constant_scalar(0.0);
    for (&term, w) in components.iter().zip(weights.as_array()) {
        if w != 0.0 {
            let t = tape.scale(term, w);
            total = tape.add(total, t);
        }
    }
    LossVars { gates, components, total }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerEpoch {
    pub epoch: usize,
    /// Unweighted terms, averaged over training graphs.
    pub components: LossComponents,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExplainerLog {
    pub epochs: Vec<ExplainerEpoch>,
}

/// Optimize explainer parameters only; the verifier is read-only.
pub fn train_explainers(
    verifier: &Verifier,
    explainer: &mut Explainer,
    data: &[PreparedGraph],
    weights: &LossWeights,
    cfg: &ExplainerTrainConfig,
) -> Result<ExplainerLog> {
    weights.validate()?;
    if data.is_empty() {
        return Err(Error::Data("no graphs to train the explainers on".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }, &explainer.store);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = ExplainerLog::default();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedGraph> = idx.iter().map(|&i| &data[i]).collect();
            let graphs: Vec<&InputGraph> = batch.iter().map(|p| &p.graph).collect();
            let stacks: Vec<&HiddenStack> = batch.iter().map(|p| &p.hidden).collect();
            let noise = GateNoise::sample(&BatchFeatures::new(&stacks, &graphs), &mut rng);
            let mut tape = Tape::new();
            let pe = explainer.store.bind(&mut tape, true);
            let lv = loss_graph(&mut tape, verifier, explainer, &pe, &batch, Some(&noise), weights);
            let values = LossComponents::from_array(lv.components.map(|v| tape.scalar(v)));
            values.check_finite()?;
            let t = tape.scalar(lv.total);
            if !t.is_finite() {
                return Err(Error::NonFinite { component: "total".into() });
            }
            for (s, v) in sums.iter_mut().zip(values.as_array()) {
                *s += v * batch.len() as f64;
            }
            total += t * batch.len() as f64;
            let grads = tape.backward(lv.total);
            let g = collect_grads(&explainer.store, &pe, &grads);
            if g.iter().any(|m| m.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite { component: "explainer gradient".into() });
            }
            opt.update(&mut explainer.store, &g);
        }
        let n = data.len() as f64;
        let components = LossComponents::from_array(sums.map(|s| s / n));
        let rec = ExplainerEpoch { epoch, components, total: total / n };
        log::info!(
            "explainer epoch {epoch}: total {:.4} (F {:.4} C {:.4} SS {:.4} ST {:.4} L0 {:.2})",
            rec.total,
            components.fidelity,
            components.consistency,
            components.salience_sentence,
            components.salience_token,
            components.l0
        );
        log.epochs.push(rec);
    }
    Ok(log)
}
