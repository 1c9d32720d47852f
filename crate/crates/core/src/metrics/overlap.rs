use serde::Serialize;

use super::sum::mean;
use crate::error::{Error, Result};

/// Token selections of one instance together with a sentence partition.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSelection {
    /// Selected evidence tokens per node (`|x_i|` is the row length).
    pub tokens: Vec<Vec<u8>>,
    /// 1 for nodes in `X_s`, 0 for `X_ns`.
    pub partition: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceOverlap {
    pub tro_r: Option<f64>,
    pub tro_n: Option<f64>,
    /// Kept tokens inside `X_s`.
    pub kept_rationale: usize,
    /// Kept tokens inside `X_ns`.
    pub kept_noise: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapReport {
    pub tro_r: f64,
    pub tro_n: f64,
    /// `None` when no instance has a rationale sentence or `tro_r = 0`.
    pub consistency: Option<f64>,
    pub instances: Vec<InstanceOverlap>,
}

impl OverlapReport {
    /// Fraction of instances with at most `epsilon` kept tokens inside `X_s`
    /// and none inside `X_ns`.
    pub fn epsilon_audit(&self, epsilon: usize) -> f64 {
        if self.instances.is_empty() {
            return 0.0;
        }
        let ok = self.instances.iter().filter(|i| i.kept_rationale <= epsilon && i.kept_noise == 0).count();
        ok as f64 / self.instances.len() as f64
    }
}

fn mean_ratio(sel: &InstanceSelection, side: u8) -> (Option<f64>, usize) {
    let mut kept = 0;
    let ratios: Vec<f64> = sel
        .tokens
        .iter()
        .zip(&sel.partition)
        .filter(|(t, &p)| p == side && !t.is_empty())
        .map(|(t, _)| {
            let k = t.iter().filter(|&&x| x == 1).count();
            kept += k;
            k as f64 / t.len() as f64
        })
        .collect();
    (mean(ratios), kept)
}

pub fn instance_overlap(sel: &InstanceSelection) -> Result<InstanceOverlap> {
    if sel.tokens.len() != sel.partition.len() {
        return Err(Error::Shape(format!(
            "partition covers {} nodes but selection has {}",
            sel.partition.len(),
            sel.tokens.len()
        )));
    }
    let (tro_r, kept_rationale) = mean_ratio(sel, 1);
    let (tro_n, kept_noise) = mean_ratio(sel, 0);
    Ok(InstanceOverlap { tro_r, tro_n, kept_rationale, kept_noise })
}

/// Token-rationale overlap with the rationale and non-rationale sentences,
/// averaged per instance and then over the split.
pub fn tro(selections: &[InstanceSelection]) -> Result<OverlapReport> {
    let instances = selections.iter().map(instance_overlap).collect::<Result<Vec<_>>>()?;
    let r = mean(instances.iter().filter_map(|i| i.tro_r));
    let n = mean(instances.iter().filter_map(|i| i.tro_n)).unwrap_or(0.0);
    let consistency = match r {
        Some(r) if r > 0.0 => Some(1.0 - n / r),
        _ => None,
    };
    Ok(OverlapReport { tro_r: r.unwrap_or(0.0), tro_n: n, consistency, instances })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kept(k: usize, n: usize) -> Vec<u8> {
        (0..n).map(|i| u8::from(i < k)).collect()
    }

    #[test]
    fn hand_counted_instance() {
        let sel = InstanceSelection { tokens: vec![kept(4, 8), kept(2, 4), kept(1, 10)], partition: vec![1, 1, 0] };
        let r = tro(&[sel]).unwrap();
        assert!((r.tro_r - 0.5).abs() < 1e-12);
        assert!((r.tro_n - 0.1).abs() < 1e-12);
        assert!((r.consistency.unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn perfect_consistency() {
        let sel = InstanceSelection { tokens: vec![kept(3, 3), kept(0, 5)], partition: vec![1, 0] };
        let r = tro(&[sel]).unwrap();
        assert_eq!((r.tro_r, r.tro_n, r.consistency), (1.0, 0.0, Some(1.0)));
        assert_eq!(r.epsilon_audit(3), 1.0);
        assert_eq!(r.epsilon_audit(2), 0.0);
    }

    #[test]
    fn undefined_when_nothing_is_retained() {
        let empty_xs = InstanceSelection { tokens: vec![kept(1, 3)], partition: vec![0] };
        assert_eq!(tro(&[empty_xs]).unwrap().consistency, None);
        let zero = InstanceSelection { tokens: vec![kept(0, 3), kept(1, 3)], partition: vec![1, 0] };
        assert_eq!(tro(&[zero]).unwrap().consistency, None);
    }

    #[test]
    fn macro_average_over_instances() {
        let a = InstanceSelection { tokens: vec![kept(1, 1), kept(0, 1)], partition: vec![1, 0] };
        let b = InstanceSelection { tokens: vec![kept(0, 10), kept(5, 10)], partition: vec![1, 0] };
        let r = tro(&[a, b]).unwrap();
        assert!((r.tro_r - 0.5).abs() < 1e-12);
        assert!((r.tro_n - 0.25).abs() < 1e-12);
    }

    #[test]
    fn gold_rationales_keep_nothing_outside_gold_sentences() {
        use crate::graph_input::{generate_synthetic, SyntheticConfig};
        let s =
            generate_synthetic(&SyntheticConfig { train_size: 50, dev_size: 0, test_size: 0, ..Default::default() })
                .unwrap();
        let sel: Vec<InstanceSelection> = s
            .train
            .iter()
            .map(|i| InstanceSelection {
                tokens: i.token_rationales.clone().unwrap(),
                partition: i.sentence_rationales.clone(),
            })
            .collect();
        let r = tro(&sel).unwrap();
        assert!(r.instances.iter().all(|i| i.kept_noise == 0));
        assert_eq!(r.consistency, Some(1.0));
        assert_eq!(r.epsilon_audit(usize::MAX), 1.0);
    }

    #[test]
    fn partition_must_cover_nodes() {
        let bad = InstanceSelection { tokens: vec![kept(1, 2)], partition: vec![1, 0] };
        assert!(tro(&[bad]).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::collection::vec;
    use proptest::prelude::*;

    fn instance() -> impl Strategy<Value = InstanceSelection> {
        (2usize..7).prop_flat_map(|n| {
            (vec(vec(0u8..2, 1..8), n), vec(0u8..2, n))
                .prop_map(|(tokens, partition)| InstanceSelection { tokens, partition })
        })
    }

    proptest! {
        #[test]
        fn consistency_matches_its_definition(sel in vec(instance(), 1..6)) {
            let r = tro(&sel).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.tro_r) && (0.0..=1.0).contains(&r.tro_n));
            match r.consistency {
                Some(c) => prop_assert!((c - (1.0 - r.tro_n / r.tro_r)).abs() < 1e-9),
                None => prop_assert!(r.tro_r == 0.0),
            }
        }

        #[test]
        fn sentence_order_does_not_matter(sel in instance(), rot in 0usize..7) {
            let n = sel.tokens.len();
            let k = rot % n;
            let mut shuffled = sel.clone();
            shuffled.tokens.rotate_left(k);
            shuffled.partition.rotate_left(k);
            let (a, b) = (tro(&[sel]).unwrap(), tro(&[shuffled]).unwrap());
            prop_assert!((a.tro_r - b.tro_r).abs() < 1e-12);
            prop_assert!((a.tro_n - b.tro_n).abs() < 1e-12);
        }
    }
}
