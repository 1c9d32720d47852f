use ndarray::Array2;

use crate::tape::{Mat, Tape, Var};

const ATTN_SLOPE: f64 = 0.2;

/// Edge weights of one graph and the support they induce.
pub struct AdjacencyVars {
    /// `n×n` multiplicative edge weights applied after normalization.
    pub weights: Var,
    pub support: Array2<bool>,
}

impl AdjacencyVars {
    /// Support is `{(i, j) : A_ij > 0}`; a row with no edge keeps only its
    /// self-loop (weight 1).
    pub fn from_weighted(tape: &mut Tape, weighted: Var) -> Self {
        let a = tape.value(weighted);
        let n = a.nrows();
        let mut support = a.mapv(|w| w > 0.0);
        let mut forced = Mat::zeros((n, n));
        for i in 0..n {
            if !support.row(i).iter().any(|&s| s) {
                support[[i, i]] = true;
                forced[[i, i]] = 1.0;
            }
        }
        let weights = if forced.iter().any(|&f| f != 0.0) {
            let f = tape.constant(forced);
            tape.add(weighted, f)
        } else {
            weighted
        };
        Self { weights, support }
    }

    pub fn constant(tape: &mut Tape, a: &Mat) -> Self {
        let w = tape.constant(a.clone());
        Self::from_weighted(tape, w)
    }
}

/// Single-head graph attention over the `[CLS]` rows of several graphs with a
/// residual connection. `graphs` lists `(first node row in cls, adjacency)`.
pub fn gat_layer(tape: &mut Tape, cls: Var, graphs: &[(usize, &AdjacencyVars)], w: Var, a_src: Var, a_dst: Var) -> Var {
    let wh = tape.matmul(cls, w);
    let src = tape.matmul(wh, a_src);
    let dst = tape.matmul(wh, a_dst);
    let mut messages = Vec::with_capacity(graphs.len());
    for &(start, adj) in graphs {
        let n = adj.support.nrows();
        let s = tape.slice_rows(src, start, n);
        let d = tape.slice_rows(dst, start, n);
        let dt = tape.transpose(d);
        let e = tape.add(s, dt);
        let e = tape.leaky_relu(e, ATTN_SLOPE);
        let alpha = tape.masked_softmax_rows(e, &adj.support);
        let alpha = tape.mul(alpha, adj.weights);
        let h = tape.slice_rows(wh, start, n);
        messages.push(tape.matmul(alpha, h));
    }
    let msg = tape.concat_rows(&messages);
    tape.add(cls, msg)
}
