use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hard_concrete::{hard_concrete_tape, prob_nonzero_tape, HardConcreteParams};
use crate::error::{Error, Result};
use crate::graph_input::InputGraph;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Mat, Tape, Var};
use crate::verifier::{HiddenStack, LayerMasks, MaskVars, Prediction, Verifier};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainerConfig {
    pub hard_concrete: HardConcreteParams,
    /// Inference threshold on composed gate probabilities.
    pub tau: f64,
    /// Also gate the hidden states entering every hop.
    pub mask_hidden_layers: bool,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self { hard_concrete: HardConcreteParams::default(), tau: 0.5, mask_hidden_layers: true }
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.hard_concrete.validate()?;
        check_tau(self.tau)
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold tau must lie in (0, 1), got {tau}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Reparameterized Hard Concrete samples.
    Train,
    /// Deterministic: every factor is its gate probability.
    Eval,
}

/// Token and sentence gates of one graph with their per-layer factors.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    /// Composed token gates over each evidence span.
    pub z: Vec<Vec<f64>>,
    pub pt: Vec<Vec<f64>>,
    pub m: Vec<f64>,
    pub ps: Vec<f64>,
    /// `[layer][node][j]`
    pub z_layers: Vec<Vec<Vec<f64>>>,
    pub pt_layers: Vec<Vec<Vec<f64>>>,
    /// `[layer][node]`
    pub m_layers: Vec<Vec<f64>>,
    pub ps_layers: Vec<Vec<f64>>,
}

/// Token half of a [`MaskPair`].
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGates {
    pub z: Vec<Vec<f64>>,
    pub pt: Vec<Vec<f64>>,
    pub z_layers: Vec<Vec<Vec<f64>>>,
    pub pt_layers: Vec<Vec<Vec<f64>>>,
}

/// Sentence half of a [`MaskPair`].
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceGates {
    pub m: Vec<f64>,
    pub ps: Vec<f64>,
    pub m_layers: Vec<Vec<f64>>,
    pub ps_layers: Vec<Vec<f64>>,
}

/// A graph with its masks, ready for the verifier. The adjacency keeps the
/// edges between retained sentences; edge weights `m_i m_j` and token gates
/// are applied by the verifier from `masks`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedGraph {
    pub graph: InputGraph,
    pub masks: LayerMasks,
}

impl PerturbedGraph {
    pub fn predict(&self, verifier: &Verifier) -> Result<Prediction> {
        Ok(verifier.predict_masked(&[&self.graph], &[&self.masks])?.remove(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RationaleSet {
    /// Selected evidence tokens per node, independent of sentence selection.
    pub tokens: Vec<Vec<u8>>,
    pub sentences: Vec<u8>,
    pub perturbed: PerturbedGraph,
    pub tau: f64,
}

impl RationaleSet {
    pub fn num_tokens(&self) -> usize {
        self.tokens.iter().flatten().filter(|&&t| t == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.iter().all(|&s| s == 0)
    }
}

/// Multiply token embeddings by `z` and restrict the adjacency to sentences
/// with `m > 0`. With `hidden_layers = Some(L)` the same gates are applied to
/// the hidden states entering each of the `L` hops.
pub fn apply_masks(
    graph: &InputGraph,
    z: &[Vec<f64>],
    m: &[f64],
    hidden_layers: Option<usize>,
) -> Result<PerturbedGraph> {
    let n = graph.num_nodes();
    if m.len() != n || z.len() != n || z.iter().zip(&graph.evidence_spans).any(|(v, s)| v.len() != s.len()) {
        return Err(Error::Shape("masks do not match the graph layout".into()));
    }
    let mut g = graph.clone();
    for i in 0..n {
        for j in 0..n {
            if m[i] <= 0.0 || m[j] <= 0.0 {
                g.adjacency[[i, j]] = 0.0;
            }
        }
    }
    let hidden = hidden_layers.map(|l| vec![(z.to_vec(), m.to_vec()); l]);
    Ok(PerturbedGraph { graph: g, masks: LayerMasks { token: z.to_vec(), sentence: m.to_vec(), hidden } })
}

/// Threshold gate probabilities: `z = 1(pt > τ)`, `m = 1(ps > τ)`.
pub fn infer_rationales(
    graph: &InputGraph,
    pt: &[Vec<f64>],
    ps: &[f64],
    tau: f64,
    hidden_layers: Option<usize>,
) -> Result<RationaleSet> {
    check_tau(tau)?;
    let tokens: Vec<Vec<u8>> = pt.iter().map(|v| v.iter().map(|&p| u8::from(p > tau)).collect()).collect();
    let sentences: Vec<u8> = ps.iter().map(|&p| u8::from(p > tau)).collect();
    let z: Vec<Vec<f64>> = tokens.iter().map(|v| v.iter().map(|&t| f64::from(t)).collect()).collect();
    let m: Vec<f64> = sentences.iter().map(|&s| f64::from(s)).collect();
    let perturbed = apply_masks(graph, &z, &m, hidden_layers)?;
    Ok(RationaleSet { tokens, sentences, perturbed, tau })
}

#[derive(Debug, Clone, Copy)]
struct Interpreter {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Hidden-state features of a batch, layer-major: all evidence rows of
/// layer 0, then layer 1, and so on.
#[derive(Debug, Clone)]
pub struct BatchFeatures {
    pub tokens: Mat,
    pub sentences: Mat,
    pub layers: usize,
    pub num_evidence: usize,
    pub num_nodes: usize,
}

impl BatchFeatures {
    pub fn new(stacks: &[&HiddenStack], graphs: &[&InputGraph]) -> Self {
        let layers = stacks[0].num_layers();
        let d = stacks[0].layers[0].ncols();
        let e: usize = graphs.iter().map(|g| g.total_evidence()).sum();
        let n: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let mut tokens = Mat::zeros((layers * e, d));
        let mut sentences = Mat::zeros((layers * n, d));
        for l in 0..layers {
            let (mut r, mut s) = (l * e, l * n);
            for (h, g) in stacks.iter().zip(graphs) {
                for (i, span) in g.evidence_spans.iter().enumerate() {
                    for j in span.clone() {
                        tokens.row_mut(r).assign(&h.token(l, i, j));
                        r += 1;
                    }
                    sentences.row_mut(s).assign(&h.sentence(l, i));
                    s += 1;
                }
            }
        }
        Self { tokens, sentences, layers, num_evidence: e, num_nodes: n }
    }
}

/// Hard Concrete noise for one batch.
#[derive(Debug, Clone)]
pub struct GateNoise {
    pub tokens: Mat,
    pub sentences: Mat,
}

impl GateNoise {
    pub fn sample<R: Rng>(f: &BatchFeatures, rng: &mut R) -> Self {
        let mut draw = |rows| Mat::from_shape_simple_fn((rows, 1), || rng.sample::<f64, _>(Open01));
        let tokens = draw(f.layers * f.num_evidence);
        let sentences = draw(f.layers * f.num_nodes);
        Self { tokens, sentences }
    }
}

/// Gates on the tape: per-layer factors (`E×1` / `N×1`) and their products.
pub struct GateVars {
    pub z_layers: Vec<Var>,
    pub pt_layers: Vec<Var>,
    pub m_layers: Vec<Var>,
    pub ps_layers: Vec<Var>,
    pub z: Var,
    pub pt: Var,
    pub m: Var,
    pub ps: Var,
}

/// The token explainer `g_t` and sentence explainer `g_s`: one-hidden-layer
/// MLPs mapping a normalized hidden state to a Hard Concrete log-alpha.
pub struct Explainer {
    pub config: ExplainerConfig,
    pub d_model: usize,
    pub store: ParamStore,
    token: Interpreter,
    sentence: Interpreter,
}

impl Clone for Explainer {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            d_model: self.d_model,
            store: self.store.clone(),
            token: self.token,
            sentence: self.sentence,
        }
    }
}

impl Explainer {
    pub fn new(config: ExplainerConfig, d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let std = 1.0 / (d_model as f64).sqrt();
        let mut mlp = |name: &str, store: &mut ParamStore| Interpreter {
            w1: store.add_normal(&format!("{name}.w1"), (d_model, d_model), std, &mut rng),
            b1: store.add_zeros(&format!("{name}.b1"), (1, d_model)),
            w2: store.add_normal(&format!("{name}.w2"), (d_model, 1), 0.1 * std, &mut rng),
            b2: store.add_zeros(&format!("{name}.b2"), (1, 1)),
        };
        let token = mlp("g_t", &mut store);
        let sentence = mlp("g_s", &mut store);
        Self { config, d_model, store, token, sentence }
    }

    /// Explainer whose every gate has the fixed log-alpha `log_alpha`.
    pub fn constant(config: ExplainerConfig, d_model: usize, log_alpha: f64) -> Self {
        let mut e = Self::new(config, d_model, 0);
        for it in [e.token, e.sentence] {
            e.store.get_mut(it.w2).fill(0.0);
            e.store.get_mut(it.b2).fill(log_alpha);
        }
        e
    }

    pub fn param_hash(&self) -> String {
        self.store.hash()
    }

    fn interpret(&self, tape: &mut Tape, p: &Bound, it: &Interpreter, x: Var) -> Var {
        let x = tape.layer_norm(x, LN_EPS);
        let h = tape.matmul(x, p.var(it.w1));
        let h = tape.add(h, p.var(it.b1));
        let h = tape.tanh(h);
        let o = tape.matmul(h, p.var(it.w2));
        tape.add(o, p.var(it.b2))
    }

    /// Gate factors for every layer and their products. Without noise the
    /// factors are the gate probabilities.
    pub fn gates(&self, tape: &mut Tape, p: &Bound, f: &BatchFeatures, noise: Option<&GateNoise>) -> GateVars {
        let hc = self.config.hard_concrete;
        let xt = tape.constant(f.tokens.clone());
        let xs = tape.constant(f.sentences.clone());
        let la_t = self.interpret(tape, p, &self.token, xt);
        let la_s = self.interpret(tape, p, &self.sentence, xs);
        let (zt, ptt, zs, pss) = match noise {
            Some(nz) => {
                let (zt, ptt) = hard_concrete_tape(tape, la_t, &nz.tokens, &hc);
                let (zs, pss) = hard_concrete_tape(tape, la_s, &nz.sentences, &hc);
                (zt, ptt, zs, pss)
            }
            None => {
                let ptt = prob_nonzero_tape(tape, la_t, &hc);
                let pss = prob_nonzero_tape(tape, la_s, &hc);
                (ptt, ptt, pss, pss)
            }
        };
        let split = |tape: &mut Tape, v: Var, n: usize| -> Vec<Var> {
            (0..f.layers).map(|l| tape.slice_rows(v, l * n, n)).collect()
        };
        let z_layers = split(tape, zt, f.num_evidence);
        let pt_layers = split(tape, ptt, f.num_evidence);
        let m_layers = split(tape, zs, f.num_nodes);
        let ps_layers = split(tape, pss, f.num_nodes);
        let z = product(tape, &z_layers);
        let pt = product(tape, &pt_layers);
        let m = product(tape, &m_layers);
        let ps = product(tape, &ps_layers);
        GateVars { z_layers, pt_layers, m_layers, ps_layers, z, pt, m, ps }
    }

    /// Verifier masks from gates: composed token and sentence gates, and
    /// cumulative products up to layer `l` for the hidden state entering
    /// hop `l`.
    pub fn mask_vars(&self, tape: &mut Tape, g: &GateVars) -> MaskVars {
        let hops = g.z_layers.len() - 1;
        let hidden = self.config.mask_hidden_layers.then(|| {
            let mut out = Vec::with_capacity(hops);
            let (mut zc, mut mc) = (g.z_layers[0], g.m_layers[0]);
            for l in 0..hops {
                if l > 0 {
                    zc = tape.mul(zc, g.z_layers[l]);
                    mc = tape.mul(mc, g.m_layers[l]);
                }
                out.push((zc, mc));
            }
            out
        });
        MaskVars { token: g.z, sentence: g.m, hidden }
    }

    /// Gates for a batch of encoded graphs as plain values.
    pub fn mask_pairs(
        &self,
        stacks: &[&HiddenStack],
        graphs: &[&InputGraph],
        mode: MaskMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<MaskPair>> {
        if stacks.len() != graphs.len() || stacks.is_empty() {
            return Err(Error::Shape("one hidden stack per graph required".into()));
        }
        if stacks.iter().any(|s| s.layers[0].ncols() != self.d_model) {
            return Err(Error::Shape(format!("explainer expects width {}", self.d_model)));
        }
        let f = BatchFeatures::new(stacks, graphs);
        let noise = match (mode, rng) {
            (MaskMode::Train, Some(rng)) => Some(GateNoise::sample(&f, rng)),
            (MaskMode::Train, None) => return Err(Error::Config("training-mode masks need a noise source".into())),
            (MaskMode::Eval, _) => None,
        };
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let g = self.gates(&mut tape, &p, &f, noise.as_ref());
        let col = |v: Var| tape.value(v).column(0).to_vec();
        let (zl, ptl): (Vec<Vec<f64>>, Vec<Vec<f64>>) =
            (g.z_layers.iter().map(|&v| col(v)).collect(), g.pt_layers.iter().map(|&v| col(v)).collect());
        let (ml, psl): (Vec<Vec<f64>>, Vec<Vec<f64>>) =
            (g.m_layers.iter().map(|&v| col(v)).collect(), g.ps_layers.iter().map(|&v| col(v)).collect());
        let (z, pt, m, ps) = (col(g.z), col(g.pt), col(g.m), col(g.ps));

        let mut out = Vec::with_capacity(graphs.len());
        let (mut e0, mut n0) = (0, 0);
        for gr in graphs {
            let n = gr.num_nodes();
            let per_node = |v: &[f64]| {
                let mut off = e0;
                gr.evidence_spans
                    .iter()
                    .map(|s| {
                        let r = v[off..off + s.len()].to_vec();
                        off += s.len();
                        r
                    })
                    .collect::<Vec<_>>()
            };
            let nodes = |v: &[f64]| v[n0..n0 + n].to_vec();
            out.push(MaskPair {
                z: per_node(&z),
                pt: per_node(&pt),
                m: nodes(&m),
                ps: nodes(&ps),
                z_layers: zl.iter().map(|v| per_node(v)).collect(),
                pt_layers: ptl.iter().map(|v| per_node(v)).collect(),
                m_layers: ml.iter().map(|v| nodes(v)).collect(),
                ps_layers: psl.iter().map(|v| nodes(v)).collect(),
            });
            e0 += gr.total_evidence();
            n0 += n;
        }
        Ok(out)
    }

    pub fn token_masks(
        &self,
        h: &HiddenStack,
        graph: &InputGraph,
        mode: MaskMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TokenGates> {
        let p = self.mask_pairs(&[h], &[graph], mode, rng)?.remove(0);
        Ok(TokenGates { z: p.z, pt: p.pt, z_layers: p.z_layers, pt_layers: p.pt_layers })
    }

    pub fn sentence_masks(
        &self,
        h: &HiddenStack,
        graph: &InputGraph,
        mode: MaskMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<SentenceGates> {
        let p = self.mask_pairs(&[h], &[graph], mode, rng)?.remove(0);
        Ok(SentenceGates { m: p.m, ps: p.ps, m_layers: p.m_layers, ps_layers: p.ps_layers })
    }

    /// Encode, gate in eval mode and threshold at `tau`.
    pub fn explain(&self, verifier: &Verifier, graphs: &[&InputGraph], tau: f64) -> Result<Vec<Explanation>> {
        check_tau(tau)?;
        let hidden_layers = self.config.mask_hidden_layers.then_some(verifier.config.layers);
        let mut out = Vec::with_capacity(graphs.len());
        for chunk in graphs.chunks(32) {
            let encoded = verifier.run(chunk, None)?;
            let stacks: Vec<&HiddenStack> = encoded.iter().map(|e| &e.0).collect();
            let pairs = self.mask_pairs(&stacks, chunk, MaskMode::Eval, None)?;
            let rationales = pairs
                .iter()
                .zip(chunk)
                .map(|(p, g)| infer_rationales(g, &p.pt, &p.ps, tau, hidden_layers))
                .collect::<Result<Vec<_>>>()?;
            let pg: Vec<&InputGraph> = rationales.iter().map(|r| &r.perturbed.graph).collect();
            let pm: Vec<&LayerMasks> = rationales.iter().map(|r| &r.perturbed.masks).collect();
            let perturbed = verifier.predict_masked(&pg, &pm)?;
            for (((enc, pair), rationale), pred) in encoded.into_iter().zip(pairs).zip(rationales).zip(perturbed) {
                out.push(Explanation { full: enc.1, pair, rationale, perturbed: pred });
            }
        }
        Ok(out)
    }
}

/// Eval-mode explanation of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub full: Prediction,
    pub pair: MaskPair,
    pub rationale: RationaleSet,
    pub perturbed: Prediction,
}

impl Explanation {
    /// `‖f(G) − f(G_R)‖₂`
    pub fn fidelity(&self) -> f64 {
        let d: f64 =
            self.full.class_lengths.iter().zip(&self.perturbed.class_lengths).map(|(a, b)| (a - b) * (a - b)).sum();
        d.sqrt()
    }
}

fn product(tape: &mut Tape, factors: &[Var]) -> Var {
    let mut acc = factors[0];
    for &f in &factors[1..] {
        acc = tape.mul(acc, f);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_input::{build_graph, Instance, LabelSet, Vocabulary};
    use crate::verifier::VerifierConfig;

    fn tiny() -> (Verifier, InputGraph) {
        let cfg = VerifierConfig {
            layers: 2,
            sublayers_per_hop: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            capsule_dim: 4,
            routing_iters: 3,
            num_classes: 2,
            dropout: 0.0,
            max_len: 16,
        };
        let vocab = Vocabulary::new(["a", "b", "c", "d", "e", "f"]);
        let inst = Instance {
            claim: "a b".into(),
            evidence: vec!["c d e".into(), "f a".into(), "b c".into()],
            label: "SUPPORTED".into(),
            sentence_rationales: vec![1, 0, 1],
            token_rationales: None,
        };
        let g = build_graph(&inst, &vocab, &LabelSet::default(), 16).unwrap();
        (Verifier::new(cfg, vocab.len(), 4), g)
    }

    #[test]
    fn composed_values_are_layer_products() {
        let (v, g) = tiny();
        let h = v.encode(&g, None).unwrap();
        let e = Explainer::new(ExplainerConfig::default(), 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mode in [MaskMode::Train, MaskMode::Eval] {
            let p = e.mask_pairs(&[&h], &[&g], mode, Some(&mut rng)).unwrap().remove(0);
            assert_eq!(p.z_layers.len(), 3);
            for i in 0..3 {
                let prod: f64 = p.ps_layers.iter().map(|l| l[i]).product();
                assert!((prod - p.ps[i]).abs() < 1e-12);
                for j in 0..p.pt[i].len() {
                    let prod: f64 = p.pt_layers.iter().map(|l| l[i][j]).product();
                    assert!((prod - p.pt[i][j]).abs() < 1e-12);
                    let zprod: f64 = p.z_layers.iter().map(|l| l[i][j]).product();
                    assert!((zprod - p.z[i][j]).abs() < 1e-12);
                    assert!((0.0..=1.0).contains(&p.z[i][j]));
                }
            }
        }
    }

    #[test]
    fn outer_product_adjacency() {
        let (_, g) = tiny();
        let z: Vec<Vec<f64>> = g.evidence_spans.iter().map(|s| vec![1.0; s.len()]).collect();
        let pg = apply_masks(&g, &z, &[1.0, 0.0, 1.0], None).unwrap();
        for k in 0..3 {
            assert_eq!(pg.graph.adjacency[[1, k]], 0.0);
            assert_eq!(pg.graph.adjacency[[k, 1]], 0.0);
        }
        assert_eq!(pg.graph.adjacency[[0, 2]], 1.0);
        assert!(apply_masks(&g, &z, &[1.0, 0.0], None).is_err());
    }

    #[test]
    fn identity_gates_leave_logits_unchanged() {
        let (v, g) = tiny();
        let z: Vec<Vec<f64>> = g.evidence_spans.iter().map(|s| vec![1.0; s.len()]).collect();
        let pg = apply_masks(&g, &z, &[1.0; 3], Some(2)).unwrap();
        assert_eq!(pg.predict(&v).unwrap().class_lengths, v.predict(&g).class_lengths);
    }

    #[test]
    fn thresholding() {
        let (_, g) = tiny();
        let mut pt: Vec<Vec<f64>> = g.evidence_spans.iter().map(|s| vec![0.0; s.len()]).collect();
        let r = infer_rationales(&g, &pt, &[0.0; 3], 0.5, None).unwrap();
        assert!(r.is_empty());
        assert_eq!(r.num_tokens(), 0);
        assert!(r.perturbed.graph.adjacency.iter().all(|&a| a == 0.0));
        pt[0][2] = 0.9;
        let r = infer_rationales(&g, &pt, &[0.0; 3], 0.5, None).unwrap();
        assert_eq!(r.tokens[0], vec![0, 0, 1]);
        assert!(infer_rationales(&g, &pt, &[0.0; 3], 1.0, None).is_err());
    }

    #[test]
    fn constant_explainers() {
        let (v, g) = tiny();
        let open = Explainer::constant(ExplainerConfig::default(), 8, 50.0);
        let ex = open.explain(&v, &[&g], 0.5).unwrap().remove(0);
        assert_eq!(ex.fidelity(), 0.0);
        assert_eq!(ex.rationale.sentences, vec![1, 1, 1]);
        let closed = Explainer::constant(ExplainerConfig::default(), 8, -50.0);
        let ex = closed.explain(&v, &[&g], 0.5).unwrap().remove(0);
        assert!(ex.rationale.is_empty());
        assert!(ex.perturbed.class_lengths.iter().all(|&l| l == 0.0));
    }
}
