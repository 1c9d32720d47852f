use serde::{Serialize, Serializer};

use super::overlap::{tro, InstanceSelection, OverlapReport};
use super::scores::{classification_metrics, macro_prf, mean_fidelity, sentence_rationale_prf, token_agreement, Prf};
use super::sum::mean;
use crate::error::Result;
use crate::explainers::Explanation;
use crate::graph_input::InputGraph;

fn na<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_str("n/a"),
    }
}

/// Split-level scores as one flat JSON object; undefined values print as
/// `"n/a"`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub split: String,
    pub instances: usize,
    pub tau: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub fidelity: f64,
    /// Predicted sentence partition.
    pub tro_r: f64,
    pub tro_n: f64,
    #[serde(serialize_with = "na")]
    pub consistency: Option<f64>,
    /// Gold sentence partition.
    pub gold_tro_r: f64,
    pub gold_tro_n: f64,
    #[serde(serialize_with = "na")]
    pub gold_consistency: Option<f64>,
    pub epsilon: usize,
    pub epsilon_audit: f64,
    pub sentence_precision: f64,
    pub sentence_recall: f64,
    pub sentence_f1: f64,
    #[serde(serialize_with = "na")]
    pub token_spearman: Option<f64>,
    #[serde(serialize_with = "na")]
    pub token_precision: Option<f64>,
    #[serde(serialize_with = "na")]
    pub token_recall: Option<f64>,
    #[serde(serialize_with = "na")]
    pub token_f1: Option<f64>,
    pub empty_rationales: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn selections(ex: &[Explanation], partitions: impl Iterator<Item = Vec<u8>>) -> Vec<InstanceSelection> {
    ex.iter()
        .zip(partitions)
        .map(|(e, partition)| InstanceSelection { tokens: e.rationale.tokens.clone(), partition })
        .collect()
}

/// Score explanations of `graphs` (same order).
pub fn build_report(
    split: &str,
    graphs: &[InputGraph],
    ex: &[Explanation],
    num_classes: usize,
    tau: f64,
    epsilon: usize,
) -> Result<MetricsReport> {
    let preds: Vec<usize> = ex.iter().map(|e| e.full.label).collect();
    let gold: Vec<usize> = graphs.iter().map(|g| g.label).collect();
    let cls = classification_metrics(&preds, &gold, num_classes)?;
    let predicted: OverlapReport = tro(&selections(ex, ex.iter().map(|e| e.rationale.sentences.clone())))?;
    let annotated: OverlapReport = tro(&selections(ex, graphs.iter().map(|g| g.sentence_labels.clone())))?;
    let sent: Vec<Vec<u8>> = ex.iter().map(|e| e.rationale.sentences.clone()).collect();
    let gold_sent: Vec<Vec<u8>> = graphs.iter().map(|g| g.sentence_labels.clone()).collect();
    let sprf = sentence_rationale_prf(&sent, &gold_sent)?;

    let (spearman, tprf) = if graphs.iter().all(|g| g.token_labels.is_some()) {
        let per = ex
            .iter()
            .zip(graphs)
            .map(|(e, g)| {
                let pt: Vec<f64> = e.pair.pt.concat();
                let gl: Vec<u8> = g.token_labels.as_ref().expect("checked").concat();
                token_agreement(&pt, &gl, tau)
            })
            .collect::<Result<Vec<_>>>()?;
        let prfs: Vec<Prf> = per.iter().map(|a| a.prf).collect();
        (mean(per.iter().filter_map(|a| a.spearman)), Some(macro_prf(&prfs)))
    } else {
        log::warn!("split {split} has no gold token labels; token agreement omitted");
        (None, None)
    };

    Ok(MetricsReport {
        split: split.to_string(),
        instances: graphs.len(),
        tau,
        accuracy: cls.accuracy,
        macro_f1: cls.macro_f1,
        fidelity: mean_fidelity(ex),
        tro_r: predicted.tro_r,
        tro_n: predicted.tro_n,
        consistency: predicted.consistency,
        gold_tro_r: annotated.tro_r,
        gold_tro_n: annotated.tro_n,
        gold_consistency: annotated.consistency,
        epsilon,
        epsilon_audit: annotated.epsilon_audit(epsilon),
        sentence_precision: sprf.precision,
        sentence_recall: sprf.recall,
        sentence_f1: sprf.f1,
        token_spearman: spearman,
        token_precision: tprf.map(|p| p.precision),
        token_recall: tprf.map(|p| p.recall),
        token_f1: tprf.map(|p| p.f1),
        empty_rationales: ex.iter().filter(|e| e.rationale.is_empty()).count(),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Rows for the predicted and the gold sentence partition, columns
/// Acc, F1, Fidelity, TRO-R, TRO-N, Consistency.
pub fn render_table(r: &MetricsReport) -> String {
    let mut out = format!(
        "{:<10} {:>8} {:>8} {:>9} {:>8} {:>8} {:>12}\n",
        "partition", "Acc", "F1", "Fidelity", "TRO-R", "TRO-N", "Consistency"
    );
    for (name, tr, tn, c) in
        [("predicted", r.tro_r, r.tro_n, r.consistency), ("gold", r.gold_tro_r, r.gold_tro_n, r.gold_consistency)]
    {
        out += &format!(
            "{:<10} {:>8.4} {:>8.4} {:>9.4} {:>8.4} {:>8.4} {:>12}\n",
            name,
            r.accuracy,
            r.macro_f1,
            r.fidelity,
            tr,
            tn,
            cell(c)
        );
    }
    out
}
