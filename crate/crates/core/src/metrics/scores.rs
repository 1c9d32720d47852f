use serde::Serialize;

use super::sum::{compensated_sum, mean};
use crate::error::{Error, Result};
use crate::explainers::{Explainer, Explanation};
use crate::graph_input::InputGraph;
use crate::verifier::Verifier;

/// Mean `‖f(G) − f(G_R)‖₂` under thresholded masks.
pub fn fidelity_metric(verifier: &Verifier, explainer: &Explainer, graphs: &[InputGraph]) -> Result<f64> {
    let refs: Vec<&InputGraph> = graphs.iter().collect();
    let ex = explainer.explain(verifier, &refs, explainer.config.tau)?;
    Ok(mean_fidelity(&ex))
}

pub fn mean_fidelity(explanations: &[Explanation]) -> f64 {
    mean(explanations.iter().map(Explanation::fidelity)).unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Classification {
    pub accuracy: f64,
    pub macro_f1: f64,
}

pub fn classification_metrics(predictions: &[usize], gold: &[usize], num_classes: usize) -> Result<Classification> {
    if predictions.len() != gold.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predictions.len(), gold.len())));
    }
    if gold.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    if let Some(&c) = predictions.iter().chain(gold).find(|&&c| c >= num_classes) {
        return Err(Error::Data(format!("class index {c} outside {num_classes} classes")));
    }
    let correct = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    let f1s = (0..num_classes).map(|c| {
        let tp = predictions.iter().zip(gold).filter(|&(&p, &g)| p == c && g == c).count() as f64;
        let fp = predictions.iter().zip(gold).filter(|&(&p, &g)| p == c && g != c).count() as f64;
        let fn_ = predictions.iter().zip(gold).filter(|&(&p, &g)| p != c && g == c).count() as f64;
        if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        }
    });
    Ok(Classification {
        accuracy: correct as f64 / gold.len() as f64,
        macro_f1: compensated_sum(f1s) / num_classes as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision/recall/F1 of one binary selection. Both empty counts as a
/// perfect match.
pub fn prf(predicted: &[u8], gold: &[u8]) -> Result<Prf> {
    if predicted.len() != gold.len() {
        return Err(Error::Shape(format!("{} predicted vs {} gold indicators", predicted.len(), gold.len())));
    }
    let tp = predicted.iter().zip(gold).filter(|&(&p, &g)| p == 1 && g == 1).count() as f64;
    let np = predicted.iter().filter(|&&p| p == 1).count() as f64;
    let ng = gold.iter().filter(|&&g| g == 1).count() as f64;
    if np == 0.0 && ng == 0.0 {
        return Ok(Prf { precision: 1.0, recall: 1.0, f1: 1.0 });
    }
    let precision = if np > 0.0 { tp / np } else { 0.0 };
    let recall = if ng > 0.0 { tp / ng } else { 0.0 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(Prf { precision, recall, f1 })
}

/// Macro average over instances of per-instance sentence P/R/F1.
pub fn sentence_rationale_prf(predicted: &[Vec<u8>], gold: &[Vec<u8>]) -> Result<Prf> {
    if predicted.len() != gold.len() {
        return Err(Error::Shape("instance counts differ".into()));
    }
    let per = predicted.iter().zip(gold).map(|(p, g)| prf(p, g)).collect::<Result<Vec<_>>>()?;
    Ok(macro_prf(&per))
}

pub(crate) fn macro_prf(per: &[Prf]) -> Prf {
    Prf {
        precision: mean(per.iter().map(|p| p.precision)).unwrap_or(0.0),
        recall: mean(per.iter().map(|p| p.recall)).unwrap_or(0.0),
        f1: mean(per.iter().map(|p| p.f1)).unwrap_or(0.0),
    }
}

/// Ranks starting at 1, ties receiving their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation; `None` if either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let mx = mean(rx.iter().copied())?;
    let my = mean(ry.iter().copied())?;
    let cov = compensated_sum(rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)));
    let vx = compensated_sum(rx.iter().map(|a| (a - mx) * (a - mx)));
    let vy = compensated_sum(ry.iter().map(|b| (b - my) * (b - my)));
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TokenAgreement {
    pub spearman: Option<f64>,
    pub prf: Prf,
}

/// Rank agreement of `pt` with gold token flags, plus P/R/F1 of `pt > tau`.
pub fn token_agreement(pt: &[f64], gold: &[u8], tau: f64) -> Result<TokenAgreement> {
    if pt.len() != gold.len() {
        return Err(Error::Shape(format!("{} scores vs {} gold tokens", pt.len(), gold.len())));
    }
    let g: Vec<f64> = gold.iter().map(|&x| f64::from(x)).collect();
    let sel: Vec<u8> = pt.iter().map(|&p| u8::from(p > tau)).collect();
    Ok(TokenAgreement { spearman: spearman(pt, &g), prf: prf(&sel, gold)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_examples() {
        let c = classification_metrics(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
        assert_eq!((c.accuracy, c.macro_f1), (1.0, 1.0));
        let c = classification_metrics(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(c.accuracy, 0.5);
        assert!((c.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
        let swapped = classification_metrics(&[1, 1, 1, 1], &[1, 1, 0, 0], 2).unwrap();
        assert_eq!(c, swapped);
        assert!(classification_metrics(&[], &[], 2).is_err());
        assert!(classification_metrics(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn absent_classes_count_as_zero() {
        let c = classification_metrics(&[0, 1], &[0, 1], 3).unwrap();
        assert!((c.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sentence_prf_examples() {
        let e = vec![vec![1, 0, 1, 0, 0]];
        assert_eq!(sentence_rationale_prf(&e, &e).unwrap(), Prf { precision: 1.0, recall: 1.0, f1: 1.0 });
        let all = sentence_rationale_prf(&[vec![1; 5]], &e).unwrap();
        assert!((all.precision - 0.4).abs() < 1e-12);
        assert_eq!(all.recall, 1.0);
        assert_eq!(sentence_rationale_prf(&[vec![0; 5]], &e).unwrap().recall, 0.0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[0.9, 0.1, 0.1, 0.5]), vec![4.0, 1.5, 1.5, 3.0]);
    }

    #[test]
    fn token_agreement_oracle() {
        let pt = [0.9, 0.8, 0.1, 0.2, 0.7, 0.1];
        let gold = [1, 1, 0, 0, 1, 0];
        let a = token_agreement(&pt, &gold, 0.5).unwrap();
        assert_eq!(a.prf, Prf { precision: 1.0, recall: 1.0, f1: 1.0 });
        // scipy.stats.spearmanr(pt, gold)
        assert!((a.spearman.unwrap() - 0.8911327886790069).abs() < 1e-12);
    }

    fn toy_graphs() -> (Verifier, Vec<InputGraph>) {
        use crate::graph_input::{build_graph, generate_synthetic, LabelSet, SyntheticConfig};
        let cfg = SyntheticConfig { train_size: 6, dev_size: 0, test_size: 0, ..Default::default() };
        let s = generate_synthetic(&cfg).unwrap();
        let v = Verifier::new(crate::verifier::tiny_config(), s.vocab.len(), 3);
        let graphs =
            s.train.iter().map(|i| build_graph(i, &s.vocab, &LabelSet::default(), v.config.max_len).unwrap()).collect();
        (v, graphs)
    }

    #[test]
    fn identity_explainer_has_zero_fidelity() {
        use crate::explainers::ExplainerConfig;
        let (v, graphs) = toy_graphs();
        let keep_all = Explainer::constant(ExplainerConfig::default(), v.config.d_model, 60.0);
        assert_eq!(fidelity_metric(&v, &keep_all, &graphs).unwrap(), 0.0);
        let drop_all = Explainer::constant(ExplainerConfig::default(), v.config.d_model, -60.0);
        assert!(fidelity_metric(&v, &drop_all, &graphs).unwrap() > 0.0);
    }

    #[test]
    fn single_instance_fidelity_is_its_loss() {
        use crate::explainers::ExplainerConfig;
        use crate::objectives::fidelity_loss;
        let (v, graphs) = toy_graphs();
        let e = Explainer::new(ExplainerConfig::default(), v.config.d_model, 1);
        let ex = e.explain(&v, &[&graphs[0]], 0.5).unwrap();
        let expected = fidelity_loss(&ex[0].full.class_lengths, &ex[0].perturbed.class_lengths);
        assert_eq!(fidelity_metric(&v, &e, &graphs[..1]).unwrap(), expected);
    }

    #[test]
    fn reversed_order_is_minus_one() {
        let pt = [0.1, 0.2, 0.3, 0.4];
        let g = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&pt, &g).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[0.5; 4], &g), None);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::collection::vec;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn spearman_is_a_correlation((x, y) in (2usize..30).prop_flat_map(|n| (vec(0.0..1.0f64, n), vec(0.0..1.0f64, n)))) {
            if let Some(r) = spearman(&x, &y) {
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn rates_lie_in_the_unit_interval((p, g) in (1usize..20).prop_flat_map(|n| (vec(0u8..2, n), vec(0u8..2, n)))) {
            let r = prf(&p, &g).unwrap();
            for v in [r.precision, r.recall, r.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn label_permutation_keeps_scores((p, g) in (1usize..40).prop_flat_map(|n| (vec(0usize..3, n), vec(0usize..3, n)))) {
            let perm = [2, 0, 1];
            let a = classification_metrics(&p, &g, 3).unwrap();
            let pp: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
            let gp: Vec<usize> = g.iter().map(|&c| perm[c]).collect();
            let b = classification_metrics(&pp, &gp, 3).unwrap();
            prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
            prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        }
    }
}
