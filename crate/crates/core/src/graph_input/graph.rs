use std::ops::Range;

use super::dataset::{Instance, LabelSet};
use super::vocab::{tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::tape::Mat;

/// Fully connected evidence graph. Node `i` holds
/// `[CLS] claim [SEP] evidence_i [SEP]`, stored unpadded; `max_len` is the
/// length every node is padded to conceptually.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGraph {
    pub nodes: Vec<Vec<u32>>,
    pub max_len: usize,
    pub adjacency: Mat,
    /// Positions of the evidence tokens within each node.
    pub evidence_spans: Vec<Range<usize>>,
    pub claim_len: usize,
    pub label: usize,
    pub sentence_labels: Vec<u8>,
    /// Gold token flags over each evidence span (after truncation).
    pub token_labels: Option<Vec<Vec<u8>>>,
}

impl InputGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.nodes.iter().map(Vec::len).collect()
    }

    pub fn evidence_len(&self, node: usize) -> usize {
        self.evidence_spans[node].len()
    }

    pub fn total_evidence(&self) -> usize {
        self.evidence_spans.iter().map(|s| s.len()).sum()
    }

    /// Segment id: 0 for CLS, claim and the first SEP; 1 afterwards.
    pub fn segment(&self, position: usize) -> usize {
        usize::from(position >= self.claim_len + 2)
    }

    pub fn padded(&self, node: usize, pad: u32) -> Vec<u32> {
        let mut v = self.nodes[node].clone();
        v.resize(self.max_len, pad);
        v
    }

    /// Copy with evidence token `(node, j)` (index within the span) replaced.
    pub fn with_evidence_token(&self, node: usize, j: usize, id: u32) -> Self {
        let mut g = self.clone();
        let pos = g.evidence_spans[node].start + j;
        g.nodes[node][pos] = id;
        g
    }
}

/// Lay out one node per evidence sentence. Evidence tails are truncated to fit
/// `max_len`; the claim never is.
pub fn build_graph(instance: &Instance, vocab: &Vocabulary, labels: &LabelSet, max_len: usize) -> Result<InputGraph> {
    instance.validate().map_err(Error::Data)?;
    let claim = tokenize(&instance.claim, vocab);
    let fixed = claim.len() + 3;
    if fixed + 1 > max_len {
        return Err(Error::Data(format!(
            "claim of {} tokens does not fit max_len {max_len} with room for evidence",
            claim.len()
        )));
    }
    let label =
        labels.index(&instance.label).ok_or_else(|| Error::Data(format!("unknown label `{}`", instance.label)))?;
    let room = max_len - fixed;
    let n = instance.evidence.len();
    let mut nodes = Vec::with_capacity(n);
    let mut spans = Vec::with_capacity(n);
    for text in &instance.evidence {
        let mut ev = tokenize(text, vocab);
        ev.truncate(room);
        let mut node = Vec::with_capacity(fixed + ev.len());
        node.push(vocab.cls_id());
        node.extend_from_slice(&claim);
        node.push(vocab.sep_id());
        let start = node.len();
        node.extend_from_slice(&ev);
        spans.push(start..node.len());
        node.push(vocab.sep_id());
        nodes.push(node);
    }
    let token_labels = instance
        .token_rationales
        .as_ref()
        .map(|all| all.iter().zip(&spans).map(|(flags, span)| flags[..span.len()].to_vec()).collect());
    Ok(InputGraph {
        nodes,
        max_len,
        adjacency: Mat::ones((n, n)),
        evidence_spans: spans,
        claim_len: claim.len(),
        label,
        sentence_labels: instance.sentence_rationales.clone(),
        token_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(prefix: &str, n: usize) -> String {
        (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(" ")
    }

    fn instance(claim: String, evidence: Vec<String>) -> Instance {
        let n = evidence.len();
        Instance { claim, evidence, label: "SUPPORTED".into(), sentence_rationales: vec![0; n], token_rationales: None }
    }

    fn vocab() -> Vocabulary {
        let mut w: Vec<String> = (0..100).map(|i| format!("c{i}")).collect();
        w.extend((0..100).map(|i| format!("e{i}")));
        Vocabulary::new(w)
    }

    #[test]
    fn single_node_graph() {
        let g = build_graph(&instance("c0 c1".into(), vec!["e0".into()]), &vocab(), &LabelSet::default(), 64).unwrap();
        assert_eq!(g.adjacency, Mat::ones((1, 1)));
        assert_eq!(g.nodes[0].len(), 6);
    }

    #[test]
    fn five_evidence_graph() {
        let ev = (0..5).map(|i| format!("e{i}")).collect();
        let g = build_graph(&instance("c0".into(), ev), &vocab(), &LabelSet::default(), 64).unwrap();
        assert_eq!(g.num_nodes(), 5);
        assert_eq!(g.adjacency, Mat::ones((5, 5)));
        for (node, span) in g.nodes.iter().zip(&g.evidence_spans) {
            assert_eq!(node[0], 2);
            assert!(span.start > 0);
        }
    }

    #[test]
    fn long_claim_leaves_one_evidence_token() {
        let inst = instance(words("c", 60), vec![words("e", 100)]);
        let g = build_graph(&inst, &vocab(), &LabelSet::default(), 64).unwrap();
        assert_eq!(g.evidence_spans[0], 62..63);
        assert_eq!(g.nodes[0].len(), 64);
    }

    #[test]
    fn claim_that_does_not_fit_is_rejected() {
        let inst = instance(words("c", 61), vec!["e0".into()]);
        assert!(build_graph(&inst, &vocab(), &LabelSet::default(), 64).is_err());
    }

    #[test]
    fn truncation_is_stable_when_max_len_grows() {
        let inst = instance(words("c", 5), vec![words("e", 30), words("e", 3)]);
        let v = vocab();
        let short = build_graph(&inst, &v, &LabelSet::default(), 20).unwrap();
        let long = build_graph(&inst, &v, &LabelSet::default(), 40).unwrap();
        for (a, b) in short.nodes.iter().zip(&long.nodes) {
            let end = a.len() - 1;
            assert_eq!(a[..end], b[..end]);
        }
    }
}
