use ndarray::s;

use crate::error::{Error, Result};
use crate::graph_input::InputGraph;
use crate::tape::{Mat, Tape};
use crate::verifier::{BatchLayout, Verifier};

const MIN_STEPS: usize = 16;
const STEP_CHUNK: usize = 32;

/// Evidence-token pseudo-labels in `[-1, 1]`, per node.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPseudoLabels {
    pub scores: Vec<Vec<f64>>,
}

impl TokenPseudoLabels {
    /// `softmax_j s_ij` per node.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.scores
            .iter()
            .map(|s| {
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|x| x / z).collect()
            })
            .collect()
    }
}

/// Midpoint Riemann nodes on `[0, 1]`.
pub fn path_points(steps: usize) -> Vec<f64> {
    (0..steps).map(|k| (k as f64 + 0.5) / steps as f64).collect()
}

/// Integrated gradients of a scalar function given its gradient, along the
/// straight path from `baseline` to `input`.
pub fn integrated_gradients<F>(input: &[f64], baseline: &[f64], steps: usize, mut grad: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut avg = vec![0.0; input.len()];
    for a in path_points(steps) {
        let x: Vec<f64> = input.iter().zip(baseline).map(|(x, b)| b + a * (x - b)).collect();
        for (s, g) in avg.iter_mut().zip(grad(&x)) {
            *s += g / steps as f64;
        }
    }
    input.iter().zip(baseline).zip(avg).map(|((x, b), g)| (x - b) * g).collect()
}

/// Embedding-layer attributions of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct IgResult {
    /// Per node, per position: `Σ_d (x − b)·avg_grad`.
    pub attributions: Vec<Vec<f64>>,
    pub target: usize,
    pub f_input: f64,
    pub f_baseline: f64,
}

impl IgResult {
    /// `|Σ attributions − (f(x) − f(b))| / |f(x) − f(b)|`
    pub fn completeness_error(&self) -> f64 {
        let total: f64 = self.attributions.iter().flatten().sum();
        let delta = self.f_input - self.f_baseline;
        (total - delta).abs() / delta.abs()
    }
}

/// Attribute the predicted class-capsule length to the embedding-layer
/// output, against the graph with every token replaced by `[PAD]`
/// (positions and segments kept).
pub fn embedding_attributions(verifier: &Verifier, graph: &InputGraph, pad_id: u32, steps: usize) -> Result<IgResult> {
    if steps < MIN_STEPS {
        return Err(Error::Config(format!("integrated gradients need at least {MIN_STEPS} steps, got {steps}")));
    }
    let one = BatchLayout::new(&[graph]);
    let (x, b, target, f_input, f_baseline) = {
        let mut tape = Tape::new();
        let p = verifier.store.bind(&mut tape, false);
        let x = verifier.embed(&mut tape, &p, &one);
        let b = verifier.pad_embed(&mut tape, &p, &one, pad_id as usize);
        let full = verifier.forward_from(&mut tape, &p, &one, x, None, None);
        let base = verifier.forward_from(&mut tape, &p, &one, b, None, None);
        let lengths: Vec<f64> = tape.value(full.lengths).row(0).to_vec();
        let target = crate::verifier::argmax(&lengths);
        let fb = tape.value(base.lengths)[[0, target]];
        (tape.value(x).clone(), tape.value(b).clone(), target, lengths[target], fb)
    };
    let rows = x.nrows();
    let diff = &x - &b;
    let mut avg = Mat::zeros(x.dim());
    let alphas = path_points(steps);
    for chunk in alphas.chunks(STEP_CHUNK) {
        let copies = vec![graph; chunk.len()];
        let layout = BatchLayout::new(&copies);
        let mut interp = Mat::zeros((rows * chunk.len(), x.ncols()));
        for (k, &a) in chunk.iter().enumerate() {
            interp.slice_mut(s![k * rows..(k + 1) * rows, ..]).assign(&(&b + &(&diff * a)));
        }
        let mut tape = Tape::new();
        let p = verifier.store.bind(&mut tape, false);
        let leaf = tape.leaf(interp);
        let out = verifier.forward_from(&mut tape, &p, &layout, leaf, None, None);
        let col = tape.slice_cols(out.lengths, target, 1);
        let total = tape.sum_all(col);
        let grads = tape.backward(total);
        let g = grads.get_or_zeros(leaf, (rows * chunk.len(), x.ncols()));
        for k in 0..chunk.len() {
            avg += &g.slice(s![k * rows..(k + 1) * rows, ..]);
        }
    }
    avg /= steps as f64;
    let per_row: Vec<f64> = (&diff * &avg).rows().into_iter().map(|r| r.sum()).collect();
    let mut attributions = Vec::with_capacity(graph.num_nodes());
    let mut off = 0;
    for node in &graph.nodes {
        attributions.push(per_row[off..off + node.len()].to_vec());
        off += node.len();
    }
    Ok(IgResult { attributions, target, f_input, f_baseline })
}

/// Evidence-token attributions scaled by their largest magnitude in the
/// instance. A graph whose attributions all vanish gets all-zero labels.
pub fn layered_integrated_gradients(
    verifier: &Verifier,
    graph: &InputGraph,
    pad_id: u32,
    steps: usize,
) -> Result<TokenPseudoLabels> {
    let ig = embedding_attributions(verifier, graph, pad_id, steps)?;
    let raw: Vec<Vec<f64>> =
        ig.attributions.iter().zip(&graph.evidence_spans).map(|(a, span)| a[span.clone()].to_vec()).collect();
    let max = raw.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    let scores = if max > 0.0 && max.is_finite() {
        raw.iter().map(|v| v.iter().map(|x| (x / max).clamp(-1.0, 1.0)).collect()).collect()
    } else {
        raw.iter().map(|v| vec![0.0; v.len()]).collect()
    };
    Ok(TokenPseudoLabels { scores })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_attributed_exactly() {
        let w = [0.5, -2.0, 3.0];
        let x = [1.0, 2.0, -1.5];
        let attr = integrated_gradients(&x, &[0.0; 3], 16, |_| w.to_vec());
        for i in 0..3 {
            assert!((attr[i] - w[i] * x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn completeness_on_a_smooth_function() {
        // f(x) = Σ sin(x_i) x_{i+1}
        let f = |x: &[f64]| x.windows(2).map(|w| w[0].sin() * w[1]).sum::<f64>();
        let grad = |x: &[f64]| {
            let mut g = vec![0.0; x.len()];
            for i in 0..x.len() - 1 {
                g[i] += x[i].cos() * x[i + 1];
                g[i + 1] += x[i].sin();
            }
            g
        };
        let x = [0.3, -1.2, 0.8, 2.0];
        let b = [0.0; 4];
        let attr = integrated_gradients(&x, &b, 300, grad);
        let delta = f(&x) - f(&b);
        assert!((attr.iter().sum::<f64>() - delta).abs() / delta.abs() < 1e-4);
    }

    #[test]
    fn normalized_labels_are_distributions() {
        let l = TokenPseudoLabels { scores: vec![vec![1.0, -1.0, 0.0], vec![], vec![0.3]] };
        let n = l.normalized();
        assert!((n[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(n[1].is_empty());
        assert_eq!(n[2], vec![1.0]);
    }
}
