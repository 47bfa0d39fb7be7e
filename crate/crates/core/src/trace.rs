//! Decision backtracing from the dummy node's attention weights.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::StrategySet;
use crate::features::EMOTIONS;
use crate::graph::{argmax, EdgeKind, NodeKind, Payload};
use crate::model::{Model, ModelError};
use crate::tensor::Real;
use crate::train::Example;

/// One dummy in-edge at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DummyEdge {
    /// Turn index of the source node inside the window.
    pub src: usize,
    pub kind: EdgeKind,
    /// Mean over heads.
    pub alpha: f64,
    pub alpha_heads: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTrace {
    pub sample_key: String,
    pub layers: Vec<Vec<DummyEdge>>,
    pub predicted: usize,
    pub target: usize,
    /// Turn whose emotion node has the highest final-layer weight.
    pub influential_turn: Option<usize>,
    pub dominant_emotion: Option<String>,
}

impl DecisionTrace {
    pub fn is_mismatch(&self) -> bool {
        self.predicted != self.target
    }

    /// Sum of head-averaged weights per layer.
    pub fn layer_sums(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| l.iter().map(|e| e.alpha).sum())
            .collect()
    }
}

/// Run the model once and keep the dummy node's incoming attention.
pub fn trace_sample<T: Real>(model: &Model<T>, ex: &Example) -> Result<DecisionTrace, ModelError> {
    let g = &ex.graph;
    let (probs, att) = model.predict(g, &ex.context)?;
    let dummy = g.dummy();
    let layers: Vec<Vec<DummyEdge>> = att
        .layers
        .iter()
        .map(|layer| {
            layer
                .iter()
                .filter(|e| e.dst == dummy)
                .map(|e| DummyEdge {
                    src: e.src,
                    kind: e.kind,
                    alpha: e.alpha.iter().sum::<f64>() / e.alpha.len() as f64,
                    alpha_heads: e.alpha.clone(),
                })
                .collect()
        })
        .collect();

    let mut influential: Option<(usize, f64)> = None;
    if let Some(last) = layers.last() {
        for e in last.iter().filter(|e| e.kind == EdgeKind::InterReference) {
            if influential.map_or(true, |(_, a)| e.alpha > a) {
                influential = Some((e.src, e.alpha));
            }
        }
    }
    let influential_turn = influential.map(|(t, _)| t);
    let dominant_emotion = influential_turn.and_then(|t| match (g.kind(t), g.payload(t)) {
        (NodeKind::Emotion, Payload::Emotion(z)) => EMOTIONS.get(argmax(z)).map(|s| s.to_string()),
        _ => None,
    });
    Ok(DecisionTrace {
        sample_key: ex.key(),
        layers,
        predicted: argmax(&probs),
        target: ex.target,
        influential_turn,
        dominant_emotion,
    })
}

pub fn traces_jsonl(traces: &[DecisionTrace]) -> String {
    traces
        .iter()
        .map(|t| serde_json::to_string(t).expect("trace serializes") + "\n")
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternRow {
    pub truth: usize,
    pub predicted: usize,
    pub count: usize,
    /// Dominant-emotion tally for this pattern, most frequent first.
    pub emotions: Vec<(String, usize)>,
    /// Mismatches whose dominant emotion is absent.
    pub no_emotion: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisagreementReport {
    pub rows: Vec<PatternRow>,
    pub total_mismatches: usize,
    /// Number of distinct patterns before truncation.
    pub n_patterns: usize,
}

/// Group mismatches by `(truth -> predicted)`, most frequent first, and keep
/// the top `top_n`.
pub fn disagreement_report(traces: &[DecisionTrace], top_n: usize) -> DisagreementReport {
    let mut groups: BTreeMap<(usize, usize), (usize, BTreeMap<String, usize>, usize)> = BTreeMap::new();
    let mut total = 0;
    for t in traces.iter().filter(|t| t.is_mismatch()) {
        total += 1;
        let g = groups.entry((t.target, t.predicted)).or_default();
        g.0 += 1;
        match &t.dominant_emotion {
            Some(e) => *g.1.entry(e.clone()).or_default() += 1,
            None => g.2 += 1,
        }
    }
    let n_patterns = groups.len();
    let mut rows: Vec<PatternRow> = groups
        .into_iter()
        .map(|((truth, predicted), (count, em, no_emotion))| {
            let mut emotions: Vec<(String, usize)> = em.into_iter().collect();
            emotions.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            PatternRow {
                truth,
                predicted,
                count,
                emotions,
                no_emotion,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| (a.truth, a.predicted).cmp(&(b.truth, b.predicted)))
    });
    rows.truncate(top_n);
    DisagreementReport {
        rows,
        total_mismatches: total,
        n_patterns,
    }
}

/// Share of traces (optionally mismatches only) whose dominant emotion is
/// `label`, over those that have one.
pub fn emotion_share(traces: &[DecisionTrace], label: &str, mismatches_only: bool) -> Option<f64> {
    let with: Vec<&String> = traces
        .iter()
        .filter(|t| !mismatches_only || t.is_mismatch())
        .filter_map(|t| t.dominant_emotion.as_ref())
        .collect();
    if with.is_empty() {
        return None;
    }
    Some(with.iter().filter(|e| e.as_str() == label).count() as f64 / with.len() as f64)
}

impl DisagreementReport {
    pub fn to_csv(&self, set: &StrategySet) -> String {
        let mut out = String::from("ground_truth,prediction,count,top_emotion,top_emotion_count\n");
        for r in &self.rows {
            let (e, c) = r
                .emotions
                .first()
                .map(|(e, c)| (e.as_str(), *c))
                .unwrap_or(("", 0));
            let _ = writeln!(
                out,
                "\"{}\",\"{}\",{},{},{}",
                label_of(set, r.truth),
                label_of(set, r.predicted),
                r.count,
                e,
                c
            );
        }
        out
    }
}

fn label_of(set: &StrategySet, i: usize) -> &str {
    set.labels.get(i).map_or("?", String::as_str)
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz description of the sample graph, with final-layer dummy weights
/// as edge labels.
pub fn trace_dot(trace: &DecisionTrace, ex: &Example, set: &StrategySet) -> String {
    let g = &ex.graph;
    let mut out = String::new();
    let _ = writeln!(out, "digraph \"{}\" {{", dot_escape(&trace.sample_key));
    out.push_str("  rankdir=LR;\n");
    for i in 0..g.n_nodes() {
        let label = match g.payload(i) {
            Payload::Emotion(z) => format!("U{i}: {}", EMOTIONS.get(argmax(z)).unwrap_or(&"?")),
            Payload::Strategy(s) => format!("A{i}: {}", label_of(set, *s)),
            Payload::None => "dummy".to_string(),
        };
        let shape = match g.kind(i) {
            NodeKind::Emotion => "ellipse",
            NodeKind::Strategy => "box",
            NodeKind::Dummy => "doublecircle",
        };
        let _ = writeln!(out, "  n{i} [label=\"{}\", shape={shape}];", dot_escape(&label));
    }
    let last: BTreeMap<(usize, EdgeKind), f64> = trace
        .layers
        .last()
        .map(|l| l.iter().map(|e| ((e.src, e.kind), e.alpha)).collect())
        .unwrap_or_default();
    for e in g.edges() {
        let mut label = e.kind.name().to_string();
        if e.dst == g.dummy() {
            if let Some(a) = last.get(&(e.src, e.kind)) {
                let _ = write!(label, " {a:.3}");
            }
        }
        let style = if e.kind.is_aggregation() { "dashed" } else { "solid" };
        let _ = writeln!(
            out,
            "  n{} -> n{} [label=\"{}\", style={style}];",
            e.src,
            e.dst,
            dot_escape(&label)
        );
    }
    let _ = writeln!(
        out,
        "  label=\"target: {} / predicted: {}\";",
        dot_escape(label_of(set, trace.target)),
        dot_escape(label_of(set, trace.predicted))
    );
    out.push_str("}\n");
    out
}
