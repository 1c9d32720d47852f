use std::fmt::Write;

use crate::explainers::Explanation;
use crate::graph_input::{Instance, LabelSet};

const STYLE: &str = "body{font-family:sans-serif;max-width:60em;margin:auto}\
.rationale{border:2px solid #2a6;padding:.3em;margin:.3em 0}\
.dropped{color:#888;padding:.3em;margin:.3em 0}\
mark{background:#fd5}.warning{color:#b00;font-weight:bold}";

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn scores(labels: &LabelSet, lengths: &[f64]) -> String {
    lengths.iter().enumerate().map(|(c, l)| format!("{} {l:.3}", labels.name(c))).collect::<Vec<_>>().join(", ")
}

/// Kept flag per whitespace word; words past the encoded length are dropped.
fn word_flags<'a>(text: &'a str, kept: &[u8]) -> impl Iterator<Item = (&'a str, bool)> + 'a {
    let kept = kept.to_vec();
    text.split_whitespace().enumerate().map(move |(j, w)| (w, kept.get(j) == Some(&1)))
}

pub fn render_html(instances: &[Instance], ex: &[Explanation], labels: &LabelSet) -> String {
    let mut h = String::new();
    h += "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\"/>\n<title>Rationales</title>\n";
    let _ = writeln!(h, "<style>{STYLE}</style>\n</head>\n<body>");
    for (k, (inst, e)) in instances.iter().zip(ex).enumerate() {
        let _ = writeln!(h, "<section>\n<h2>Instance {}</h2>", k + 1);
        let _ = writeln!(h, "<p><b>Claim:</b> {}</p>", escape(&inst.claim));
        let _ = writeln!(
            h,
            "<p><b>Prediction:</b> {} ({})</p>\n<p><b>On rationale:</b> {} ({})</p>",
            escape(labels.name(e.full.label)),
            escape(&scores(labels, &e.full.class_lengths)),
            escape(labels.name(e.perturbed.label)),
            escape(&scores(labels, &e.perturbed.class_lengths))
        );
        if e.rationale.is_empty() {
            h += "<p class=\"warning\">Empty rationale: no evidence sentence was selected.</p>\n";
        }
        for (i, text) in inst.evidence.iter().enumerate() {
            let kept = e.rationale.sentences[i] == 1;
            let words: Vec<String> = word_flags(text, &e.rationale.tokens[i])
                .map(|(w, t)| if t { format!("<mark>{}</mark>", escape(w)) } else { escape(w) })
                .collect();
            if kept {
                let _ = writeln!(h, "<div class=\"rationale\">{}</div>", words.join(" "));
            } else {
                let _ = writeln!(h, "<div class=\"dropped\"><s>{}</s></div>", words.join(" "));
            }
        }
        h += "</section>\n";
    }
    h += "</body>\n</html>\n";
    h
}

/// Plain-text view: `[x]` kept sentences, `[ ]` dropped ones struck with
/// `~~`, retained tokens in `*stars*`.
pub fn render_terminal(instances: &[Instance], ex: &[Explanation], labels: &LabelSet) -> String {
    let mut t = String::new();
    for (k, (inst, e)) in instances.iter().zip(ex).enumerate() {
        let _ = writeln!(t, "#{} claim: {}", k + 1, inst.claim);
        let _ = writeln!(
            t,
            "   predicted {} ({}); on rationale {} ({})",
            labels.name(e.full.label),
            scores(labels, &e.full.class_lengths),
            labels.name(e.perturbed.label),
            scores(labels, &e.perturbed.class_lengths)
        );
        if e.rationale.is_empty() {
            t += "   WARNING: empty rationale, no evidence sentence selected\n";
        }
        for (i, text) in inst.evidence.iter().enumerate() {
            let words: Vec<String> = word_flags(text, &e.rationale.tokens[i])
                .map(|(w, kept)| if kept { format!("*{w}*") } else { w.to_string() })
                .collect();
            if e.rationale.sentences[i] == 1 {
                let _ = writeln!(t, "   [x] {}", words.join(" "));
            } else {
                let _ = writeln!(t, "   [ ] ~~{}~~", words.join(" "));
            }
        }
    }
    t
}
