use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Instance;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

pub const SUPPORTED: &str = "SUPPORTED";
pub const REFUTED: &str = "REFUTED";

/// Knobs for the synthetic k-hop entity-chain task.
///
/// A claim reads `e0 r1 e1 r2 e2 ...` over chain entities. Each hop is stated
/// by one evidence sentence with filler words mixed in; a refuted claim has
/// one hop stated negated (`e1 not r2 e2`). Noise sentences relate entities
/// from a separate distractor pool and carry the negation at random, so only
/// chain sentences decide the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Size of the pool claims draw their chain entities from.
    pub num_entities: usize,
    /// Size of the disjoint pool noise sentences draw from.
    pub distractor_entities: usize,
    pub num_relations: usize,
    pub chain_length: usize,
    pub evidence_per_claim: usize,
    pub noise_evidence_count: usize,
    /// Probability that a noise sentence is negated.
    pub noise_negation_rate: f64,
    /// Probability that a noise sentence names one chain entity.
    pub distractor_overlap: f64,
    /// Number of distinct filler words.
    pub vocab_size: usize,
    /// Each evidence sentence gets between 1 and this many filler words.
    pub max_fillers: usize,
    pub seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_entities: 16,
            distractor_entities: 16,
            num_relations: 6,
            chain_length: 2,
            evidence_per_claim: 5,
            noise_evidence_count: 3,
            noise_negation_rate: 0.5,
            distractor_overlap: 0.0,
            vocab_size: 12,
            max_fillers: 3,
            seed: 13,
            train_size: 1000,
            dev_size: 100,
            test_size: 100,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.chain_length < 2 {
            return fail(format!("chain_length must be at least 2, got {}", self.chain_length));
        }
        if self.noise_evidence_count < 1 {
            return fail("noise_evidence_count must be at least 1".into());
        }
        if self.chain_length + self.noise_evidence_count != self.evidence_per_claim {
            return fail(format!(
                "evidence_per_claim ({}) must equal chain_length + noise_evidence_count ({})",
                self.evidence_per_claim,
                self.chain_length + self.noise_evidence_count
            ));
        }
        if self.num_entities < self.chain_length + 1 {
            return fail(format!(
                "num_entities ({}) too small for a {}-hop chain",
                self.num_entities, self.chain_length
            ));
        }
        if self.distractor_entities < 2 {
            return fail("distractor_entities must be at least 2".into());
        }
        if self.num_relations == 0 || self.vocab_size == 0 || self.max_fillers == 0 {
            return fail("num_relations, vocab_size and max_fillers must be positive".into());
        }
        for (name, p) in
            [("noise_negation_rate", self.noise_negation_rate), ("distractor_overlap", self.distractor_overlap)]
        {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let ents = (0..self.num_entities + self.distractor_entities).map(entity);
        let rels = (0..self.num_relations).map(relation);
        let fill = (0..self.vocab_size).map(filler);
        Vocabulary::new(ents.chain(rels).chain([NEGATION.to_string()]).chain(fill))
    }
}

const NEGATION: &str = "not";

fn entity(i: usize) -> String {
    format!("ent{i}")
}
fn relation(i: usize) -> String {
    format!("rel{i}")
}
fn filler(i: usize) -> String {
    format!("w{i}")
}

/// `head [not] rel tail`
fn statement(head: usize, rel: usize, tail: usize, negated: bool) -> Vec<String> {
    let mut core = vec![entity(head)];
    if negated {
        core.push(NEGATION.to_string());
    }
    core.push(relation(rel));
    core.push(entity(tail));
    core
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplits {
    pub vocab: Vocabulary,
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test: Vec<Instance>,
}

/// Generate train/dev/test from one seeded stream.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticSplits> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut split = |n: usize| (0..n).map(|_| generate_one(config, &mut rng)).collect::<Vec<_>>();
    let train = split(config.train_size);
    let dev = split(config.dev_size);
    let test = split(config.test_size);
    Ok(SyntheticSplits { vocab: config.vocabulary(), train, dev, test })
}

/// Core tokens with fillers inserted at random positions; returns words and
/// per-word core flags.
fn sentence<R: Rng>(core: Vec<String>, cfg: &SyntheticConfig, rng: &mut R) -> (Vec<String>, Vec<u8>) {
    let mut words: Vec<(String, u8)> = core.into_iter().map(|w| (w, 1)).collect();
    for _ in 0..rng.gen_range(1..=cfg.max_fillers) {
        let at = rng.gen_range(0..=words.len());
        words.insert(at, (filler(rng.gen_range(0..cfg.vocab_size)), 0));
    }
    words.into_iter().unzip()
}

fn generate_one<R: Rng>(cfg: &SyntheticConfig, rng: &mut R) -> Instance {
    let k = cfg.chain_length;
    let chain: Vec<usize> = (0..cfg.num_entities).collect::<Vec<_>>().choose_multiple(rng, k + 1).cloned().collect();
    let rels: Vec<usize> = (0..k).map(|_| rng.gen_range(0..cfg.num_relations)).collect();

    let mut claim = vec![entity(chain[0])];
    for h in 0..k {
        claim.push(relation(rels[h]));
        claim.push(entity(chain[h + 1]));
    }

    let supported = rng.gen_bool(0.5);
    let contradicted = (!supported).then(|| rng.gen_range(0..k));

    // (text, sentence flag, token flags)
    let mut evidence: Vec<(String, u8, Vec<u8>)> = Vec::with_capacity(cfg.evidence_per_claim);
    for h in 0..k {
        let core = statement(chain[h], rels[h], chain[h + 1], contradicted == Some(h));
        let (words, flags) = sentence(core, cfg, rng);
        evidence.push((words.join(" "), 1, flags));
    }
    let distractors: Vec<usize> = (cfg.num_entities..cfg.num_entities + cfg.distractor_entities).collect();
    for _ in 0..cfg.noise_evidence_count {
        let mut pair: Vec<usize> = distractors.choose_multiple(rng, 2).cloned().collect();
        if rng.gen_bool(cfg.distractor_overlap) {
            let side = rng.gen_range(0..2);
            pair[side] = chain[rng.gen_range(0..=k)];
        }
        let rel = rng.gen_range(0..cfg.num_relations);
        let negated = rng.gen_bool(cfg.noise_negation_rate);
        let (words, flags) = sentence(statement(pair[0], rel, pair[1], negated), cfg, rng);
        evidence.push((words.join(" "), 0, vec![0; flags.len()]));
    }
    evidence.shuffle(rng);

    Instance {
        claim: claim.join(" "),
        label: if supported { SUPPORTED } else { REFUTED }.to_string(),
        sentence_rationales: evidence.iter().map(|e| e.1).collect(),
        token_rationales: Some(evidence.iter().map(|e| e.2.clone()).collect()),
        evidence: evidence.into_iter().map(|e| e.0).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exactly_k_rationale_sentences() {
        let cfg = SyntheticConfig { train_size: 200, dev_size: 0, test_size: 0, ..Default::default() };
        let s = generate_synthetic(&cfg).unwrap();
        for inst in &s.train {
            assert_eq!(inst.evidence.len(), 5);
            assert_eq!(inst.sentence_rationales.iter().filter(|&&e| e == 1).count(), 2);
            inst.validate().unwrap();
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let cfg = SyntheticConfig { train_size: 50, dev_size: 5, test_size: 5, ..Default::default() };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SyntheticConfig { seed: 99, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap().train, generate_synthetic(&other).unwrap().train);
    }

    #[test]
    fn labels_are_balanced() {
        let cfg = SyntheticConfig { train_size: 1000, dev_size: 0, test_size: 0, ..Default::default() };
        let s = generate_synthetic(&cfg).unwrap();
        let sup = s.train.iter().filter(|i| i.label == SUPPORTED).count() as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&sup), "supported fraction {sup}");
    }

    #[test]
    fn gold_tokens_live_in_gold_sentences() {
        let s = generate_synthetic(&SyntheticConfig { train_size: 100, ..Default::default() }).unwrap();
        for inst in s.train.iter().chain(&s.test) {
            for (flags, &e) in inst.token_rationales.as_ref().unwrap().iter().zip(&inst.sentence_rationales) {
                if e == 0 {
                    assert!(flags.iter().all(|&f| f == 0));
                } else {
                    assert!((3..=4).contains(&flags.iter().filter(|&&f| f == 1).count()));
                }
            }
        }
    }

    #[test]
    fn noise_entities_are_disjoint_from_the_chain() {
        let s = generate_synthetic(&SyntheticConfig { train_size: 100, ..Default::default() }).unwrap();
        for inst in &s.train {
            let claim_ents: Vec<&str> = inst.claim.split_whitespace().filter(|w| w.starts_with("ent")).collect();
            for (text, &e) in inst.evidence.iter().zip(&inst.sentence_rationales) {
                let overlap = text.split_whitespace().any(|w| claim_ents.contains(&w));
                assert_eq!(overlap, e == 1);
            }
        }
    }

    #[test]
    fn overlapping_distractors_name_one_chain_entity() {
        let cfg = SyntheticConfig { train_size: 100, distractor_overlap: 1.0, ..Default::default() };
        for inst in &generate_synthetic(&cfg).unwrap().train {
            let claim_ents: Vec<&str> = inst.claim.split_whitespace().filter(|w| w.starts_with("ent")).collect();
            for (text, _) in inst.evidence.iter().zip(&inst.sentence_rationales).filter(|(_, &e)| e == 0) {
                let shared = text.split_whitespace().filter(|w| claim_ents.contains(w)).count();
                assert_eq!(shared, 1);
            }
        }
    }

    #[test]
    fn negation_appears_only_in_refuted_chains() {
        let s = generate_synthetic(&SyntheticConfig { train_size: 200, ..Default::default() }).unwrap();
        for inst in &s.train {
            let negated_hops = inst
                .evidence
                .iter()
                .zip(&inst.sentence_rationales)
                .filter(|(t, &e)| e == 1 && t.split_whitespace().any(|w| w == "not"))
                .count();
            assert_eq!(negated_hops, usize::from(inst.label == REFUTED));
        }
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let bad = [
            SyntheticConfig { chain_length: 1, evidence_per_claim: 4, ..Default::default() },
            SyntheticConfig { noise_evidence_count: 0, evidence_per_claim: 2, ..Default::default() },
            SyntheticConfig { num_entities: 2, ..Default::default() },
            SyntheticConfig { distractor_entities: 1, ..Default::default() },
            SyntheticConfig { num_relations: 0, ..Default::default() },
            SyntheticConfig { noise_negation_rate: 1.5, ..Default::default() },
            SyntheticConfig { evidence_per_claim: 6, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gold_annotations_are_consistent(seed in any::<u64>(), k in 2usize..4, noise in 1usize..4) {
            let cfg = SyntheticConfig {
                seed,
                chain_length: k,
                noise_evidence_count: noise,
                evidence_per_claim: k + noise,
                train_size: 20,
                dev_size: 0,
                test_size: 0,
                ..Default::default()
            };
            for inst in generate_synthetic(&cfg).unwrap().train {
                prop_assert!(inst.validate().is_ok());
                prop_assert_eq!(inst.sentence_rationales.iter().filter(|&&e| e == 1).count(), k);
                let tokens = inst.token_rationales.as_ref().unwrap();
                for (flags, &e) in tokens.iter().zip(&inst.sentence_rationales) {
                    // no gold token outside a gold sentence
                    prop_assert!(e == 1 || flags.iter().all(|&f| f == 0));
                }
            }
        }
    }
}
