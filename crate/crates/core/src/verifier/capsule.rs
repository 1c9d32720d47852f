use serde::{Deserialize, Serialize};

use crate::tape::{Mat, Tape, Var};

const SQUASH_EPS: f64 = 1e-12;

/// Tape handles for one graph's routing result.
#[derive(Debug, Clone, Copy)]
pub struct CapsuleVars {
    /// `1×C` class-capsule lengths, each in `[0, 1)`.
    pub lengths: Var,
    /// `C×d_c` class-capsule vectors.
    pub vectors: Var,
    /// `n×C` coupling coefficients of the last iteration, before any mask.
    pub coupling: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleOutput {
    pub class_lengths: Vec<f64>,
    pub coupling: Mat,
    pub class_vectors: Mat,
}

impl CapsuleOutput {
    pub fn from_tape(tape: &Tape, v: &CapsuleVars) -> Self {
        Self {
            class_lengths: tape.value(v.lengths).iter().cloned().collect(),
            coupling: tape.value(v.coupling).clone(),
            class_vectors: tape.value(v.vectors).clone(),
        }
    }
}

/// Row-wise squash of `s` (`C×d_c`). Returns `(vectors, lengths)` with
/// lengths `|s|²/(1+|s|²)` as a `C×1` column.
pub fn squash(tape: &mut Tape, s: Var) -> (Var, Var) {
    let sq = tape.square(s);
    let sq = tape.sum_rows(sq);
    let one_plus = tape.add_scalar(sq, 1.0);
    let len = tape.div(sq, one_plus);
    let shifted = tape.add_scalar(sq, SQUASH_EPS);
    let norm = tape.sqrt(shifted);
    let factor = tape.div(len, norm);
    (tape.mul(s, factor), len)
}

/// Dynamic routing from `n` evidence capsules to `C` class capsules.
///
/// `u_hat` packs the per-class prediction vectors as `n × (C·d_c)`. When
/// `mask` (`n×1`) is given, the coupling coefficients of every iteration are
/// multiplied by it without renormalization, so a zero entry removes that
/// evidence capsule from every class capsule.
pub fn capsule_routing(
    tape: &mut Tape,
    u_hat: Var,
    num_classes: usize,
    capsule_dim: usize,
    iters: usize,
    mask: Option<Var>,
) -> CapsuleVars {
    let n = tape.shape(u_hat).0;
    let preds: Vec<Var> = (0..num_classes).map(|j| tape.slice_cols(u_hat, j * capsule_dim, capsule_dim)).collect();
    let mut logits = tape.constant(Mat::zeros((n, num_classes)));
    let mut out = None;
    for it in 0..iters {
        let coupling = tape.softmax_rows(logits);
        let routed = match mask {
            Some(m) => tape.mul(coupling, m),
            None => coupling,
        };
        let mut sums = Vec::with_capacity(num_classes);
        for (j, &pred) in preds.iter().enumerate() {
            let c = tape.slice_cols(routed, j, 1);
            let ct = tape.transpose(c);
            sums.push(tape.matmul(ct, pred));
        }
        let s = tape.concat_rows(&sums);
        let (v, len) = squash(tape, s);
        if it + 1 < iters {
            let mut agreement = Vec::with_capacity(num_classes);
            for (j, &pred) in preds.iter().enumerate() {
                let vj = tape.slice_rows(v, j, 1);
                let vt = tape.transpose(vj);
                agreement.push(tape.matmul(pred, vt));
            }
            let a = tape.concat_cols(&agreement);
            logits = tape.add(logits, a);
        }
        let lengths = tape.transpose(len);
        out = Some(CapsuleVars { lengths, vectors: v, coupling });
    }
    out.expect("at least one routing iteration")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_neg: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self { m_plus: 0.9, m_minus: 0.1, lambda_neg: 0.5 }
    }
}

/// Capsule margin loss on `1×C` lengths.
pub fn margin_loss(tape: &mut Tape, lengths: Var, label: usize, cfg: &MarginConfig) -> Var {
    let c = tape.shape(lengths).1;
    let target = Mat::from_shape_fn((1, c), |(_, j)| if j == label { 1.0 } else { 0.0 });
    let pos_w = tape.constant(target.clone());
    let neg_w = tape.constant(target.mapv(|t| (1.0 - t) * cfg.lambda_neg));
    let short = tape.rsub_scalar(cfg.m_plus, lengths);
    let short = tape.relu(short);
    let short = tape.square(short);
    let over = tape.add_scalar(lengths, -cfg.m_minus);
    let over = tape.relu(over);
    let over = tape.square(over);
    let p = tape.mul(short, pos_w);
    let q = tape.mul(over, neg_w);
    let t = tape.add(p, q);
    tape.sum_all(t)
}
