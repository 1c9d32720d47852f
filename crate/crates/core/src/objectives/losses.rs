use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_input::InputGraph;
use crate::tape::{Mat, Tape, Var};

const BCE_EPS: f64 = 1e-7;

/// Weights of the combined explainer objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub fidelity: f64,
    pub consistency: f64,
    pub salience_sentence: f64,
    pub salience_token: f64,
    pub l0: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { fidelity: 1.0, consistency: 1.0, salience_sentence: 1.0, salience_token: 0.5, l0: 0.01 }
    }
}

/// Removing one loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// No consistency term.
    C,
    /// No sentence-salience term.
    SS,
    /// No token-salience term.
    ST,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "C" => Ok(Self::C),
            "SS" => Ok(Self::SS),
            "ST" => Ok(Self::ST),
            other => Err(Error::Config(format!("unknown ablation `{other}` (expected C, SS or ST)"))),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }

    pub fn ablate(mut self, a: Ablation) -> Self {
        match a {
            Ablation::C => self.consistency = 0.0,
            Ablation::SS => self.salience_sentence = 0.0,
            Ablation::ST => self.salience_token = 0.0,
        }
        self
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.fidelity, self.consistency, self.salience_sentence, self.salience_token, self.l0]
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        let w = self.as_array();
        [
            (COMPONENT_NAMES[0], w[0]),
            (COMPONENT_NAMES[1], w[1]),
            (COMPONENT_NAMES[2], w[2]),
            (COMPONENT_NAMES[3], w[3]),
            (COMPONENT_NAMES[4], w[4]),
        ]
    }
}

pub const COMPONENT_NAMES: [&str; 5] = ["fidelity", "consistency", "salience_sentence", "salience_token", "l0"];

/// Unweighted values of the five loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub fidelity: f64,
    pub consistency: f64,
    pub salience_sentence: f64,
    pub salience_token: f64,
    pub l0: f64,
}

impl LossComponents {
    pub fn from_array(a: [f64; 5]) -> Self {
        Self { fidelity: a[0], consistency: a[1], salience_sentence: a[2], salience_token: a[3], l0: a[4] }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.fidelity, self.consistency, self.salience_sentence, self.salience_token, self.l0]
    }

    /// First non-finite component, by name.
    pub fn check_finite(&self) -> Result<()> {
        match self.as_array().iter().zip(COMPONENT_NAMES).find(|(v, _)| !v.is_finite()) {
            Some((_, name)) => Err(Error::NonFinite { component: name.to_string() }),
            None => Ok(()),
        }
    }
}

/// `Σ λ_k L_k`; a non-finite component aborts with its name.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    c.check_finite()?;
    Ok(c.as_array().iter().zip(w.as_array()).map(|(l, w)| l * w).sum())
}

/// Membership of evidence rows in nodes and of nodes in graphs for a batch.
#[derive(Debug, Clone)]
pub struct Groups {
    /// `N×E`
    pub token_node: Mat,
    /// `B×N`
    pub node_graph: Mat,
    /// `N×1`, `1/n_g` for every node of graph `g`.
    pub node_weight: Mat,
}

impl Groups {
    pub fn new(graphs: &[&InputGraph]) -> Self {
        let lengths: Vec<Vec<usize>> =
            graphs.iter().map(|g| g.evidence_spans.iter().map(|s| s.len()).collect()).collect();
        Self::from_lengths(&lengths)
    }

    /// From per-graph lists of per-node evidence lengths.
    pub fn from_lengths(lengths: &[Vec<usize>]) -> Self {
        let n: usize = lengths.iter().map(Vec::len).sum();
        let e: usize = lengths.iter().flatten().sum();
        let mut token_node = Mat::zeros((n, e));
        let mut node_graph = Mat::zeros((lengths.len(), n));
        let mut node_weight = Mat::zeros((n, 1));
        let (mut node, mut row) = (0, 0);
        for (gi, g) in lengths.iter().enumerate() {
            for &len in g {
                for _ in 0..len {
                    token_node[[node, row]] = 1.0;
                    row += 1;
                }
                node_graph[[gi, node]] = 1.0;
                node_weight[[node, 0]] = 1.0 / g.len() as f64;
                node += 1;
            }
        }
        Self { token_node, node_graph, node_weight }
    }

    pub fn num_graphs(&self) -> usize {
        self.node_graph.nrows()
    }
}

/// Softmax of the column `x` within the groups given by the rows of
/// `membership` (`G×R`, one-hot columns).
fn group_softmax(tape: &mut Tape, x: Var, membership: &Mat) -> Var {
    let xv = tape.value(x);
    let mut shift = Mat::zeros(xv.dim());
    for g in membership.rows() {
        let members: Vec<usize> = g.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(r, _)| r).collect();
        let mx = members.iter().map(|&r| xv[[r, 0]]).fold(f64::NEG_INFINITY, f64::max);
        for r in members {
            shift[[r, 0]] = mx;
        }
    }
    let shift = tape.constant(shift);
    let xs = tape.sub(x, shift);
    let ex = tape.exp(xs);
    let m = tape.constant(membership.clone());
    let mt = tape.constant(membership.t().to_owned());
    let per_group = tape.matmul(m, ex);
    let denom = tape.matmul(mt, per_group);
    tape.div(ex, denom)
}

/// Mean over the batch of `‖f(G) − f(G_R)‖₂`, rows being graphs.
pub fn fidelity_tape(tape: &mut Tape, full: Var, perturbed: Var) -> Var {
    let diff = tape.sub(full, perturbed);
    let rows = tape.shape(diff).0;
    let norms: Vec<Var> = (0..rows)
        .map(|r| {
            let row = tape.slice_rows(diff, r, 1);
            tape.norm2(row)
        })
        .collect();
    let all = tape.concat_rows(&norms);
    tape.mean_all(all)
}

/// Batch mean of the Jensen-Shannon divergence between
/// `softmax_i(Σ_j pt_ij)` and `softmax_i(ps_i)`.
pub fn consistency_tape(tape: &mut Tape, pt: Var, ps: Var, g: &Groups) -> Var {
    let tn = tape.constant(g.token_node.clone());
    let sums = tape.matmul(tn, pt);
    let p = group_softmax(tape, sums, &g.node_graph);
    let q = group_softmax(tape, ps, &g.node_graph);
    let m = tape.add(p, q);
    let m = tape.scale(m, 0.5);
    let ln_m = tape.ln(m);
    let kl = |tape: &mut Tape, a: Var| {
        let la = tape.ln(a);
        let d = tape.sub(la, ln_m);
        tape.mul(a, d)
    };
    let kp = kl(tape, p);
    let kq = kl(tape, q);
    let both = tape.add(kp, kq);
    let s = tape.sum_all(both);
    tape.scale(s, 0.5 / g.num_graphs() as f64)
}

/// Batch mean of the per-graph mean binary cross-entropy between `ps` and
/// the gold sentence labels.
pub fn salience_sentence_tape(tape: &mut Tape, ps: Var, gold: &[f64], g: &Groups) -> Var {
    let p = tape.clamp(ps, BCE_EPS, 1.0 - BCE_EPS);
    let e = Mat::from_shape_vec((gold.len(), 1), gold.to_vec()).expect("gold column");
    let not_e = e.mapv(|x| 1.0 - x);
    let ln_p = tape.ln(p);
    let one_minus = tape.rsub_scalar(1.0, p);
    let ln_q = tape.ln(one_minus);
    let e = tape.constant(e);
    let not_e = tape.constant(not_e);
    let a = tape.mul(e, ln_p);
    let b = tape.mul(not_e, ln_q);
    let ll = tape.add(a, b);
    let w = tape.constant(g.node_weight.clone());
    let wl = tape.mul(ll, w);
    let s = tape.sum_all(wl);
    tape.scale(s, -1.0 / g.num_graphs() as f64)
}

/// Batch mean of `Σ_i KL(softmax_j pt_ij ‖ ŝ_i)`; `s_hat` holds the
/// normalized pseudo-labels for every evidence row.
pub fn salience_token_tape(tape: &mut Tape, pt: Var, s_hat: &[f64], g: &Groups) -> Var {
    let p = group_softmax(tape, pt, &g.token_node);
    let ln_p = tape.ln(p);
    let ln_s =
        tape.constant(Mat::from_shape_vec((s_hat.len(), 1), s_hat.iter().map(|x| x.ln()).collect()).expect("column"));
    let d = tape.sub(ln_p, ln_s);
    let t = tape.mul(p, d);
    let s = tape.sum_all(t);
    tape.scale(s, 1.0 / g.num_graphs() as f64)
}

/// Batch mean of the expected number of open token gates.
pub fn l0_tape(tape: &mut Tape, pt: Var, g: &Groups) -> Var {
    let s = tape.sum_all(pt);
    tape.scale(s, 1.0 / g.num_graphs() as f64)
}

fn column(v: &[f64]) -> Mat {
    Mat::from_shape_vec((v.len(), 1), v.to_vec()).expect("column")
}

fn single(pt: &[Vec<f64>]) -> Groups {
    Groups::from_lengths(&[pt.iter().map(Vec::len).collect()])
}

/// `‖a − b‖₂`
pub fn fidelity_loss(full: &[f64], perturbed: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(column(full).reversed_axes());
    let b = tape.constant(column(perturbed).reversed_axes());
    let l = fidelity_tape(&mut tape, a, b);
    tape.scalar(l)
}

pub fn consistency_loss(pt: &[Vec<f64>], ps: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let g = single(pt);
    let a = tape.constant(column(&pt.concat()));
    let b = tape.constant(column(ps));
    let l = consistency_tape(&mut tape, a, b, &g);
    tape.scalar(l)
}

pub fn salience_sentence_loss(ps: &[f64], gold: &[u8]) -> f64 {
    let mut tape = Tape::new();
    let g = Groups::from_lengths(&[vec![0; ps.len()]]);
    let a = tape.constant(column(ps));
    let gold: Vec<f64> = gold.iter().map(|&e| f64::from(e)).collect();
    let l = salience_sentence_tape(&mut tape, a, &gold, &g);
    tape.scalar(l)
}

/// `s_hat` is the normalized pseudo-label distribution per node.
pub fn salience_token_loss(pt: &[Vec<f64>], s_hat: &[Vec<f64>]) -> f64 {
    let mut tape = Tape::new();
    let g = single(pt);
    let a = tape.constant(column(&pt.concat()));
    let l = salience_token_tape(&mut tape, a, &s_hat.concat(), &g);
    tape.scalar(l)
}

pub fn l0_loss(pt: &[Vec<f64>]) -> f64 {
    pt.iter().flatten().sum()
}

/// Jensen-Shannon divergence (natural log) of two distributions.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            s += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            s += 0.5 * b * (b / m).ln();
        }
    }
    s
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::collection::vec;
    use proptest::prelude::*;

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        vec(1e-6..1.0f64, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    fn gates() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
        (2usize..6).prop_flat_map(|n| (vec(vec(0.0..=1.0f64, 1..6), n), vec(0.0..=1.0f64, n)))
    }

    proptest! {
        #[test]
        fn jsd_is_symmetric_and_bounded((p, q) in (2usize..8).prop_flat_map(|n| (dist(n), dist(n)))) {
            let a = jsd(&p, &q);
            prop_assert!((a - jsd(&q, &p)).abs() < 1e-9);
            prop_assert!(a >= 0.0);
            prop_assert!(a <= std::f64::consts::LN_2 + 1e-9);
        }

        #[test]
        fn losses_are_non_negative((pt, ps) in gates()) {
            let s_hat: Vec<Vec<f64>> = pt.iter().map(|r| vec![1.0 / r.len() as f64; r.len()]).collect();
            let gold: Vec<u8> = (0..ps.len()).map(|i| (i % 2) as u8).collect();
            prop_assert!(consistency_loss(&pt, &ps) >= 0.0);
            prop_assert!(salience_sentence_loss(&ps, &gold) >= 0.0);
            prop_assert!(salience_token_loss(&pt, &s_hat) >= -1e-12);
            prop_assert!(l0_loss(&pt) >= 0.0);
            prop_assert!(fidelity_loss(&ps, &gold.iter().map(|&g| f64::from(g)).collect::<Vec<_>>()) >= 0.0);
        }

        #[test]
        fn zero_weight_ignores_the_term(c in vec(0.0..10.0f64, 5), w in vec(0.0..2.0f64, 5)) {
            let comps = LossComponents::from_array([c[0], c[1], c[2], c[3], c[4]]);
            let base = LossWeights { fidelity: w[0], consistency: w[1], salience_sentence: w[2], salience_token: w[3], l0: w[4] };
            let ablated = base.ablate(Ablation::C);
            let moved = LossComponents { consistency: c[1] + 3.0, ..comps };
            prop_assert_eq!(total_loss(&comps, &ablated).unwrap(), total_loss(&moved, &ablated).unwrap());
        }
    }
}
