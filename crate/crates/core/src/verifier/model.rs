use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::capsule::{capsule_routing, margin_loss, CapsuleOutput, CapsuleVars, MarginConfig};
use super::config::VerifierConfig;
use super::gat::{gat_layer, AdjacencyVars};
use super::layout::BatchLayout;
use crate::error::{Error, Result};
use crate::graph_input::InputGraph;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Mat, Segment, Tape, Var};

const LN_EPS: f64 = 1e-5;
const EVAL_CHUNK: usize = 32;

struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_ff1: ParamId,
    b_ff1: ParamId,
    w_ff2: ParamId,
    b_ff2: ParamId,
}

struct HopIds {
    blocks: Vec<BlockIds>,
    gat_w: ParamId,
    gat_src: ParamId,
    gat_dst: ParamId,
}

struct Ids {
    tok: ParamId,
    pos: ParamId,
    seg: ParamId,
    hops: Vec<HopIds>,
    out_g: ParamId,
    out_b: ParamId,
    caps_w: ParamId,
}

/// `(token, sentence)` gates of one layer.
pub type LayerGates = (Vec<Vec<f64>>, Vec<f64>);

/// Mask values for one graph, as consumed by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMasks {
    /// Composed token gates over each node's evidence span; multiplies the
    /// embedding rows.
    pub token: Vec<Vec<f64>>,
    /// Composed sentence gates: edge weights `A ⊙ m mᵀ` and the coupling
    /// intervention.
    pub sentence: Vec<f64>,
    /// Optional hidden-state gates applied after layer `l` (for `l < L`):
    /// `(token, sentence)` per layer.
    pub hidden: Option<Vec<LayerGates>>,
}

impl LayerMasks {
    pub fn identity(graph: &InputGraph, layers: usize, hidden: bool) -> Self {
        let token: Vec<Vec<f64>> = graph.evidence_spans.iter().map(|s| vec![1.0; s.len()]).collect();
        let sentence = vec![1.0; graph.num_nodes()];
        let hidden = hidden.then(|| vec![(token.clone(), sentence.clone()); layers]);
        Self { token, sentence, hidden }
    }

    pub fn check_shape(&self, graph: &InputGraph, layers: usize) -> Result<()> {
        let tok_ok = |t: &Vec<Vec<f64>>| {
            t.len() == graph.num_nodes() && t.iter().zip(&graph.evidence_spans).all(|(v, s)| v.len() == s.len())
        };
        let ok = tok_ok(&self.token)
            && self.sentence.len() == graph.num_nodes()
            && self
                .hidden
                .as_ref()
                .is_none_or(|h| h.len() == layers && h.iter().all(|(t, s)| tok_ok(t) && s.len() == graph.num_nodes()));
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("masks do not match the graph layout".into()))
        }
    }

    /// Stack the masks of a batch onto the tape as constants.
    pub fn to_vars(tape: &mut Tape, masks: &[&LayerMasks]) -> MaskVars {
        let col = |tape: &mut Tape, v: Vec<f64>| {
            let n = v.len();
            tape.constant(Mat::from_shape_vec((n, 1), v).expect("column"))
        };
        let flat_tok = |t: &Vec<Vec<f64>>| t.iter().flatten().cloned().collect::<Vec<_>>();
        let token = col(tape, masks.iter().flat_map(|m| flat_tok(&m.token)).collect());
        let sentence = col(tape, masks.iter().flat_map(|m| m.sentence.clone()).collect());
        let hidden = masks[0].hidden.as_ref().map(|h0| {
            (0..h0.len())
                .map(|l| {
                    let t = masks.iter().flat_map(|m| flat_tok(&m.hidden.as_ref().expect("uniform masks")[l].0));
                    let t = col(tape, t.collect());
                    let s = masks.iter().flat_map(|m| m.hidden.as_ref().expect("uniform masks")[l].1.clone());
                    let s = col(tape, s.collect());
                    (t, s)
                })
                .collect()
        });
        MaskVars { token, sentence, hidden }
    }
}

/// Tape-level masks over a whole batch: evidence rows (`E×1`) and nodes (`N×1`).
#[derive(Debug, Clone)]
pub struct MaskVars {
    pub token: Var,
    pub sentence: Var,
    pub hidden: Option<Vec<(Var, Var)>>,
}

pub struct ForwardOut {
    /// `L+1` row matrices: the embedding output and each hop's output.
    pub hidden: Vec<Var>,
    /// `B×C` class-capsule lengths.
    pub lengths: Var,
    pub capsules: Vec<CapsuleVars>,
}

/// Per-layer token and sentence representations of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStack {
    /// `L+1` matrices of shape `rows × d`, rows ordered node by node.
    pub layers: Vec<Mat>,
    pub node_rows: Vec<Segment>,
}

impl HiddenStack {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Token `j` of node `i` at layer `l`.
    pub fn token(&self, l: usize, i: usize, j: usize) -> ndarray::ArrayView1<'_, f64> {
        self.layers[l].row(self.node_rows[i].start + j)
    }

    /// Sentence (`[CLS]`) representation of node `i` at layer `l`.
    pub fn sentence(&self, l: usize, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.token(l, i, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_lengths: Vec<f64>,
    pub label: usize,
    pub capsule: CapsuleOutput,
}

pub struct Verifier {
    pub config: VerifierConfig,
    pub vocab_size: usize,
    pub margin: MarginConfig,
    pub store: ParamStore,
    ids: Ids,
}

impl Clone for Verifier {
    fn clone(&self) -> Self {
        let mut v = Verifier::new(self.config.clone(), self.vocab_size, 0);
        v.store = self.store.clone();
        v.margin = self.margin;
        v
    }
}

impl Verifier {
    pub fn new(config: VerifierConfig, vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = config.d_model;
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let tok = s.add_normal("tok_emb", (vocab_size, d), 0.1, &mut rng);
        let pos = s.add_normal("pos_emb", (config.max_len, d), 0.05, &mut rng);
        let seg = s.add_normal("seg_emb", (2, d), 0.05, &mut rng);
        let mut hops = Vec::with_capacity(config.layers);
        for h in 0..config.layers {
            let mut blocks = Vec::with_capacity(config.sublayers_per_hop);
            for b in 0..config.sublayers_per_hop {
                let p = format!("hop{h}.block{b}");
                blocks.push(BlockIds {
                    ln1_g: s.add_ones(&format!("{p}.ln1.g"), (1, d)),
                    ln1_b: s.add_zeros(&format!("{p}.ln1.b"), (1, d)),
                    w_qkv: s.add_normal(&format!("{p}.attn.w_qkv"), (d, 3 * d), lin(d), &mut rng),
                    b_qkv: s.add_zeros(&format!("{p}.attn.b_qkv"), (1, 3 * d)),
                    w_o: s.add_normal(&format!("{p}.attn.w_o"), (d, d), lin(d), &mut rng),
                    b_o: s.add_zeros(&format!("{p}.attn.b_o"), (1, d)),
                    ln2_g: s.add_ones(&format!("{p}.ln2.g"), (1, d)),
                    ln2_b: s.add_zeros(&format!("{p}.ln2.b"), (1, d)),
                    w_ff1: s.add_normal(&format!("{p}.ff.w1"), (d, config.d_ff), lin(d), &mut rng),
                    b_ff1: s.add_zeros(&format!("{p}.ff.b1"), (1, config.d_ff)),
                    w_ff2: s.add_normal(&format!("{p}.ff.w2"), (config.d_ff, d), lin(config.d_ff), &mut rng),
                    b_ff2: s.add_zeros(&format!("{p}.ff.b2"), (1, d)),
                });
            }
            hops.push(HopIds {
                blocks,
                gat_w: s.add_normal(&format!("hop{h}.gat.w"), (d, d), 0.5 * lin(d), &mut rng),
                gat_src: s.add_normal(&format!("hop{h}.gat.a_src"), (d, 1), 0.1, &mut rng),
                gat_dst: s.add_normal(&format!("hop{h}.gat.a_dst"), (d, 1), 0.1, &mut rng),
            });
        }
        let out_g = s.add_ones("out_ln.g", (1, d));
        let out_b = s.add_zeros("out_ln.b", (1, d));
        let caps_w = s.add_normal("capsule.w", (d, config.num_classes * config.capsule_dim), 0.2 * lin(d), &mut rng);
        let ids = Ids { tok, pos, seg, hops, out_g, out_b, caps_w };
        Self { config, vocab_size, margin: MarginConfig::default(), store: s, ids }
    }

    pub fn param_hash(&self) -> String {
        self.store.hash()
    }

    /// Embedding-layer output `h⁰`: token + position + segment embeddings.
    pub fn embed(&self, tape: &mut Tape, p: &Bound, layout: &BatchLayout) -> Var {
        let tok = tape.gather_rows(p.var(self.ids.tok), &layout.token_ids);
        let pos = tape.gather_rows(p.var(self.ids.pos), &layout.positions);
        let seg = tape.gather_rows(p.var(self.ids.seg), &layout.segments);
        let x = tape.add(tok, pos);
        tape.add(x, seg)
    }

    /// Embedding rows of the all-PAD version of every node (positions and
    /// segments kept).
    pub fn pad_embed(&self, tape: &mut Tape, p: &Bound, layout: &BatchLayout, pad_id: usize) -> Var {
        let ids = vec![pad_id; layout.total_rows()];
        let tok = tape.gather_rows(p.var(self.ids.tok), &ids);
        let pos = tape.gather_rows(p.var(self.ids.pos), &layout.positions);
        let seg = tape.gather_rows(p.var(self.ids.seg), &layout.segments);
        let x = tape.add(tok, pos);
        tape.add(x, seg)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layout: &BatchLayout,
        masks: Option<&MaskVars>,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> ForwardOut {
        let x0 = self.embed(tape, p, layout);
        self.forward_from(tape, p, layout, x0, masks, dropout)
    }

    /// Run the encoder and the aggregator from given embedding rows.
    pub fn forward_from(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layout: &BatchLayout,
        x0: Var,
        masks: Option<&MaskVars>,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> ForwardOut {
        let cfg = &self.config;
        let rows = layout.total_rows();
        let ones = Mat::ones((rows, 1));

        let mut x = x0;
        if let Some(m) = masks {
            let base = tape.constant(ones.clone());
            let mult = tape.scatter_rows(base, m.token, &layout.evidence_rows);
            x = tape.mul(x, mult);
        }

        let adjacency: Vec<AdjacencyVars> = layout
            .graphs
            .iter()
            .zip(&layout.adjacency)
            .map(|(g, a)| match masks {
                None => AdjacencyVars::constant(tape, a),
                Some(m) => {
                    let mg = tape.slice_rows(m.sentence, g.node_start, g.n_nodes);
                    let mt = tape.transpose(mg);
                    let outer = tape.matmul(mg, mt);
                    let a = tape.constant(a.clone());
                    let w = tape.mul(outer, a);
                    AdjacencyVars::from_weighted(tape, w)
                }
            })
            .collect();
        let graph_refs: Vec<(usize, &AdjacencyVars)> =
            layout.graphs.iter().zip(&adjacency).map(|(g, a)| (g.node_start, a)).collect();

        let mut hidden = vec![x];
        let mut hidden_idx = layout.evidence_rows.clone();
        hidden_idx.extend_from_slice(&layout.cls_rows);

        for (l, hop) in self.ids.hops.iter().enumerate() {
            if let Some(hm) = masks.and_then(|m| m.hidden.as_ref()) {
                let (t, s) = hm[l];
                let vals = tape.concat_rows(&[t, s]);
                let base = tape.constant(ones.clone());
                let mult = tape.scatter_rows(base, vals, &hidden_idx);
                x = tape.mul(x, mult);
            }
            for b in &hop.blocks {
                x = self.block(tape, p, b, x, &layout.node_rows, dropout.as_deref_mut());
            }
            let cls = tape.gather_rows(x, &layout.cls_rows);
            let cls = gat_layer(tape, cls, &graph_refs, p.var(hop.gat_w), p.var(hop.gat_src), p.var(hop.gat_dst));
            x = tape.scatter_rows(x, cls, &layout.cls_rows);
            hidden.push(x);
        }

        let cls = tape.gather_rows(x, &layout.cls_rows);
        let u = self.affine_norm(tape, cls, p.var(self.ids.out_g), p.var(self.ids.out_b));
        let u_hat = tape.matmul(u, p.var(self.ids.caps_w));
        let mut capsules = Vec::with_capacity(layout.graphs.len());
        for g in &layout.graphs {
            let ug = tape.slice_rows(u_hat, g.node_start, g.n_nodes);
            let mask = masks.map(|m| tape.slice_rows(m.sentence, g.node_start, g.n_nodes));
            capsules.push(capsule_routing(tape, ug, cfg.num_classes, cfg.capsule_dim, cfg.routing_iters, mask));
        }
        let lens: Vec<Var> = capsules.iter().map(|c| c.lengths).collect();
        let lengths = tape.concat_rows(&lens);
        ForwardOut { hidden, lengths, capsules }
    }

    fn affine_norm(&self, tape: &mut Tape, x: Var, g: Var, b: Var) -> Var {
        let n = tape.layer_norm(x, LN_EPS);
        let n = tape.mul(n, g);
        tape.add(n, b)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: Option<&mut ChaCha8Rng>) -> Var {
        let rate = self.config.dropout;
        match rng {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let m = Mat::from_shape_simple_fn(tape.shape(x), || if rng.gen::<f64>() < rate { 0.0 } else { keep });
                let m = tape.constant(m);
                tape.mul(x, m)
            }
            _ => x,
        }
    }

    fn block(
        &self,
        tape: &mut Tape,
        p: &Bound,
        b: &BlockIds,
        x: Var,
        segments: &[Segment],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let a = self.affine_norm(tape, x, p.var(b.ln1_g), p.var(b.ln1_b));
        let qkv = tape.matmul(a, p.var(b.w_qkv));
        let qkv = tape.add(qkv, p.var(b.b_qkv));
        let att = tape.segment_attention(qkv, segments, self.config.n_heads);
        let o = tape.matmul(att, p.var(b.w_o));
        let o = tape.add(o, p.var(b.b_o));
        let o = self.dropout(tape, o, rng.as_deref_mut());
        let x = tape.add(x, o);
        let a = self.affine_norm(tape, x, p.var(b.ln2_g), p.var(b.ln2_b));
        let f = tape.matmul(a, p.var(b.w_ff1));
        let f = tape.add(f, p.var(b.b_ff1));
        let f = tape.gelu(f);
        let f = tape.matmul(f, p.var(b.w_ff2));
        let f = tape.add(f, p.var(b.b_ff2));
        let f = self.dropout(tape, f, rng);
        tape.add(x, f)
    }

    /// Mean margin loss over the batch.
    pub fn loss(&self, tape: &mut Tape, out: &ForwardOut, labels: &[usize]) -> Var {
        let losses: Vec<Var> =
            out.capsules.iter().zip(labels).map(|(c, &y)| margin_loss(tape, c.lengths, y, &self.margin)).collect();
        let all = tape.concat_rows(&losses);
        tape.mean_all(all)
    }

    /// Graph attention of hop `hop` applied to standalone `[CLS]` vectors.
    pub fn gat_propagate(&self, hop: usize, cls_reps: &Mat, adjacency: &Mat) -> Mat {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let h = &self.ids.hops[hop];
        let cls = tape.constant(cls_reps.clone());
        let adj = AdjacencyVars::constant(&mut tape, adjacency);
        let out = gat_layer(&mut tape, cls, &[(0, &adj)], p.var(h.gat_w), p.var(h.gat_src), p.var(h.gat_dst));
        tape.value(out).clone()
    }

    /// Aggregate final-layer sentence representations (`n×d`) into class
    /// capsules, optionally intervening on the coupling with `mask`.
    pub fn capsule_aggregate(&self, sentence_reps: &Mat, mask: Option<&[f64]>) -> CapsuleOutput {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(sentence_reps.clone());
        let u = self.affine_norm(&mut tape, x, p.var(self.ids.out_g), p.var(self.ids.out_b));
        let u_hat = tape.matmul(u, p.var(self.ids.caps_w));
        let m = mask.map(|m| tape.constant(Mat::from_shape_vec((m.len(), 1), m.to_vec()).expect("mask column")));
        let c = &self.config;
        let v = capsule_routing(&mut tape, u_hat, c.num_classes, c.capsule_dim, c.routing_iters, m);
        CapsuleOutput::from_tape(&tape, &v)
    }

    /// Evaluate a batch of graphs, optionally masked, in eval mode.
    pub fn run(&self, graphs: &[&InputGraph], masks: Option<&[&LayerMasks]>) -> Result<Vec<(HiddenStack, Prediction)>> {
        if let Some(ms) = masks {
            if ms.len() != graphs.len() {
                return Err(Error::Shape("one mask set per graph required".into()));
            }
            for (m, g) in ms.iter().zip(graphs) {
                m.check_shape(g, self.config.layers)?;
            }
            if ms.iter().any(|m| m.hidden.is_some() != ms[0].hidden.is_some()) {
                return Err(Error::Shape("hidden masks must be all present or all absent".into()));
            }
        }
        let mut out = Vec::with_capacity(graphs.len());
        for (ci, chunk) in graphs.chunks(EVAL_CHUNK).enumerate() {
            let layout = BatchLayout::new(chunk);
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape, false);
            let mv =
                masks.map(|ms| LayerMasks::to_vars(&mut tape, &ms[ci * EVAL_CHUNK..ci * EVAL_CHUNK + chunk.len()]));
            let fo = self.forward(&mut tape, &p, &layout, mv.as_ref(), None);
            out.extend(collect_outputs(&tape, &layout, &fo));
        }
        Ok(out)
    }

    pub fn encode(&self, graph: &InputGraph, masks: Option<&LayerMasks>) -> Result<HiddenStack> {
        let ms = masks.map(|m| vec![m]);
        Ok(self.run(&[graph], ms.as_deref())?.remove(0).0)
    }

    pub fn predict(&self, graph: &InputGraph) -> Prediction {
        self.run(&[graph], None).expect("unmasked run").remove(0).1
    }

    pub fn predict_batch(&self, graphs: &[&InputGraph]) -> Vec<Prediction> {
        self.run(graphs, None).expect("unmasked run").into_iter().map(|o| o.1).collect()
    }

    pub fn predict_masked(&self, graphs: &[&InputGraph], masks: &[&LayerMasks]) -> Result<Vec<Prediction>> {
        Ok(self.run(graphs, Some(masks))?.into_iter().map(|o| o.1).collect())
    }
}

/// Split batch outputs back into per-graph values.
pub fn collect_outputs(tape: &Tape, layout: &BatchLayout, fo: &ForwardOut) -> Vec<(HiddenStack, Prediction)> {
    layout
        .graphs
        .iter()
        .zip(&fo.capsules)
        .map(|(g, caps)| {
            let layers = fo
                .hidden
                .iter()
                .map(|&h| tape.value(h).slice(ndarray::s![g.row_start..g.row_start + g.rows, ..]).to_owned())
                .collect();
            let node_rows = layout.node_rows[g.node_start..g.node_start + g.n_nodes]
                .iter()
                .map(|s| Segment { start: s.start - g.row_start, len: s.len })
                .collect();
            let capsule = CapsuleOutput::from_tape(tape, caps);
            let label = argmax(&capsule.class_lengths);
            (
                HiddenStack { layers, node_rows },
                Prediction { class_lengths: capsule.class_lengths.clone(), label, capsule },
            )
        })
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
