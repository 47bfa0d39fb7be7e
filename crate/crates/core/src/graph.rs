//! Heterogeneous dialogue graph: one node per history turn plus the dummy
//! target node, with typed discourse and aggregation edges.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Role, StrategySet, WindowSample};
use crate::features::{sequential_edges, FeatureBundle, EMOTIONS, RELATIONS};

/// `|R|`: 16 discourse relations plus self- and inter-reference.
pub const NUM_EDGE_KINDS: usize = RELATIONS.len() + 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Emotion,
    Strategy,
    Dummy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    Discourse(usize),
    SelfReference,
    InterReference,
}

impl EdgeKind {
    pub fn index(self) -> usize {
        match self {
            EdgeKind::Discourse(r) => r,
            EdgeKind::SelfReference => RELATIONS.len(),
            EdgeKind::InterReference => RELATIONS.len() + 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            i if i < RELATIONS.len() => Some(EdgeKind::Discourse(i)),
            i if i == RELATIONS.len() => Some(EdgeKind::SelfReference),
            i if i == RELATIONS.len() + 1 => Some(EdgeKind::InterReference),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeKind::Discourse(r) => RELATIONS[r],
            EdgeKind::SelfReference => "self_reference",
            EdgeKind::InterReference => "inter_reference",
        }
    }

    pub fn is_aggregation(self) -> bool {
        !matches!(self, EdgeKind::Discourse(_))
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for EdgeKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for EdgeKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        (0..NUM_EDGE_KINDS)
            .filter_map(EdgeKind::from_index)
            .find(|k| k.name() == name)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown edge kind {name:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// Raw emotion logits of a user turn.
    Emotion(Vec<f64>),
    /// Strategy class of an agent turn.
    Strategy(usize),
    None,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("bundle ({0}, {1}) does not belong to sample ({2}, {3})")]
    Mismatch(String, usize, String, usize),
    #[error("turn {0}: {1}")]
    Turn(usize, String),
    #[error("discourse edge {0}->{1} touches the dummy node or leaves the history")]
    DiscourseRange(usize, usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphOptions {
    /// Replace discourse edges with a sequential Continuation chain.
    pub sequential_discourse: bool,
    /// Also add every discourse edge in the reverse direction.
    pub reverse_discourse: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    kinds: Vec<NodeKind>,
    payloads: Vec<Payload>,
    edges: Vec<Edge>,
    incoming: Vec<Vec<usize>>,
}

impl HeteroGraph {
    /// Assemble a graph without checking invariants; see [`validate_graph`].
    /// Edges are sorted into canonical `(src, dst, kind)` order.
    pub fn from_parts(kinds: Vec<NodeKind>, payloads: Vec<Payload>, mut edges: Vec<Edge>) -> Self {
        edges.sort();
        let mut incoming = vec![Vec::new(); kinds.len()];
        for (e, edge) in edges.iter().enumerate() {
            if edge.dst < kinds.len() {
                incoming[edge.dst].push(e);
            }
        }
        Self {
            kinds,
            payloads,
            edges,
            incoming,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.kinds.len()
    }

    pub fn dummy(&self) -> usize {
        self.kinds.len() - 1
    }

    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }

    pub fn kind(&self, i: usize) -> NodeKind {
        self.kinds[i]
    }

    pub fn payload(&self, i: usize) -> &Payload {
        &self.payloads[i]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// In-edges of node `i` in canonical order.
    pub fn in_edges(&self, i: usize) -> impl Iterator<Item = &Edge> + '_ {
        self.incoming[i].iter().map(move |&e| &self.edges[e])
    }

    pub fn in_degree(&self, i: usize) -> usize {
        self.incoming[i].len()
    }

    /// Plain-text adjacency listing.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "nodes {}", self.n_nodes());
        for (i, (k, p)) in self.kinds.iter().zip(&self.payloads).enumerate() {
            let summary = match p {
                Payload::Emotion(z) => {
                    let arg = argmax(z);
                    format!("argmax={} z={:?}", EMOTIONS.get(arg).unwrap_or(&"?"), z)
                }
                Payload::Strategy(s) => format!("strategy={s}"),
                Payload::None => String::new(),
            };
            let _ = writeln!(out, "node {i} {k:?} {summary}");
        }
        let _ = writeln!(out, "edges {}", self.edges.len());
        for e in &self.edges {
            let _ = writeln!(out, "edge {} -> {} {}", e.src, e.dst, e.kind);
        }
        out
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Build the graph for one window; node `N-1` (0-based) is the dummy.
pub fn build_graph(
    sample: &WindowSample,
    bundle: &FeatureBundle,
    set: &StrategySet,
    opts: GraphOptions,
) -> Result<HeteroGraph, GraphError> {
    if bundle.dialogue_id != sample.dialogue_id || bundle.target_position != sample.target_position
    {
        return Err(GraphError::Mismatch(
            bundle.dialogue_id.clone(),
            bundle.target_position,
            sample.dialogue_id.clone(),
            sample.target_position,
        ));
    }
    let n_hist = sample.history.len();
    let dummy = n_hist;
    let mut kinds = Vec::with_capacity(n_hist + 1);
    let mut payloads = Vec::with_capacity(n_hist + 1);
    let mut edges = Vec::new();
    for (i, turn) in sample.history.iter().enumerate() {
        match turn.role {
            Role::User => {
                let z = bundle
                    .emotion_for(i)
                    .ok_or_else(|| GraphError::Turn(i, "no emotion logits for user turn".into()))?;
                if z.z.len() != EMOTIONS.len() {
                    return Err(GraphError::Turn(i, format!("{} emotion logits", z.z.len())));
                }
                kinds.push(NodeKind::Emotion);
                payloads.push(Payload::Emotion(z.z.clone()));
                edges.push(Edge {
                    src: i,
                    dst: dummy,
                    kind: EdgeKind::InterReference,
                });
            }
            Role::Agent => {
                let s = turn
                    .strategy
                    .filter(|&s| s < set.len())
                    .ok_or_else(|| GraphError::Turn(i, "unresolvable strategy".into()))?;
                kinds.push(NodeKind::Strategy);
                payloads.push(Payload::Strategy(s));
                edges.push(Edge {
                    src: i,
                    dst: dummy,
                    kind: EdgeKind::SelfReference,
                });
            }
        }
    }
    kinds.push(NodeKind::Dummy);
    payloads.push(Payload::None);

    let discourse = if opts.sequential_discourse {
        sequential_edges(n_hist)
    } else {
        bundle.discourse.clone()
    };
    for d in discourse {
        if d.src >= n_hist || d.dst >= n_hist || d.src == d.dst {
            return Err(GraphError::DiscourseRange(d.src, d.dst));
        }
        let kind = EdgeKind::Discourse(d.relation);
        edges.push(Edge {
            src: d.src,
            dst: d.dst,
            kind,
        });
        if opts.reverse_discourse {
            edges.push(Edge {
                src: d.dst,
                dst: d.src,
                kind,
            });
        }
    }
    edges.sort();
    edges.dedup();
    Ok(HeteroGraph::from_parts(kinds, payloads, edges))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NoNodes,
    LastNodeNotDummy(usize),
    ExtraDummy(usize),
    PayloadMismatch(usize),
    MissingAggregation { node: usize, kind: EdgeKind },
    WrongAggregation(Edge),
    DiscourseTouchesDummy(Edge),
    SelfLoop(Edge),
    OutOfRange(Edge),
    Duplicate(Edge),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoNodes => write!(f, "graph has no nodes"),
            Violation::LastNodeNotDummy(i) => write!(f, "node {i} should be the dummy"),
            Violation::ExtraDummy(i) => write!(f, "node {i} is a dummy before the last position"),
            Violation::PayloadMismatch(i) => write!(f, "node {i}: payload does not match kind"),
            Violation::MissingAggregation { node, kind } => {
                write!(f, "node {node}: missing {kind} edge into the dummy")
            }
            Violation::WrongAggregation(e) => {
                write!(f, "edge {}->{} {}: wrong aggregation edge", e.src, e.dst, e.kind)
            }
            Violation::DiscourseTouchesDummy(e) => {
                write!(f, "edge {}->{} {}: discourse edge touches dummy", e.src, e.dst, e.kind)
            }
            Violation::SelfLoop(e) => write!(f, "edge {}->{} {}: self loop", e.src, e.dst, e.kind),
            Violation::OutOfRange(e) => {
                write!(f, "edge {}->{} {}: node out of range", e.src, e.dst, e.kind)
            }
            Violation::Duplicate(e) => {
                write!(f, "edge {}->{} {}: duplicate", e.src, e.dst, e.kind)
            }
        }
    }
}

/// Report every invariant violation; `Ok` iff there are none.
pub fn validate_graph(g: &HeteroGraph) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    let n = g.n_nodes();
    if n == 0 {
        return Err(vec![Violation::NoNodes]);
    }
    let dummy = n - 1;
    if g.kinds[dummy] != NodeKind::Dummy {
        v.push(Violation::LastNodeNotDummy(dummy));
    }
    for (i, (k, p)) in g.kinds.iter().zip(&g.payloads).enumerate() {
        if i < dummy && *k == NodeKind::Dummy {
            v.push(Violation::ExtraDummy(i));
        }
        let ok = matches!(
            (k, p),
            (NodeKind::Emotion, Payload::Emotion(_))
                | (NodeKind::Strategy, Payload::Strategy(_))
                | (NodeKind::Dummy, Payload::None)
        );
        if !ok {
            v.push(Violation::PayloadMismatch(i));
        }
    }
    let mut seen = std::collections::HashSet::new();
    for e in &g.edges {
        if !seen.insert(*e) {
            v.push(Violation::Duplicate(*e));
            continue;
        }
        if e.src >= n || e.dst >= n {
            v.push(Violation::OutOfRange(*e));
            continue;
        }
        if e.src == e.dst {
            v.push(Violation::SelfLoop(*e));
        }
        match e.kind {
            EdgeKind::Discourse(_) => {
                if e.src == dummy || e.dst == dummy {
                    v.push(Violation::DiscourseTouchesDummy(*e));
                }
            }
            EdgeKind::SelfReference | EdgeKind::InterReference => {
                let expected = match g.kinds[e.src] {
                    NodeKind::Strategy => Some(EdgeKind::SelfReference),
                    NodeKind::Emotion => Some(EdgeKind::InterReference),
                    NodeKind::Dummy => None,
                };
                if e.dst != dummy || expected != Some(e.kind) {
                    v.push(Violation::WrongAggregation(*e));
                }
            }
        }
    }
    for i in 0..dummy {
        let kind = match g.kinds[i] {
            NodeKind::Strategy => EdgeKind::SelfReference,
            NodeKind::Emotion => EdgeKind::InterReference,
            NodeKind::Dummy => continue,
        };
        let e = Edge {
            src: i,
            dst: dummy,
            kind,
        };
        if !seen.contains(&e) {
            v.push(Violation::MissingAggregation { node: i, kind });
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;
    use crate::features::{DiscourseEdge, EmotionLogits, FallbackProvider, FeatureProvider};
    use proptest::prelude::*;

    fn sample(roles: &[Role]) -> WindowSample {
        WindowSample {
            dialogue_id: "d".into(),
            history: roles
                .iter()
                .map(|&role| Turn {
                    role,
                    text: "x".into(),
                    strategy: (role == Role::Agent).then_some(2),
                })
                .collect(),
            target_strategy: 0,
            target_position: roles.len(),
        }
    }

    fn fallback(s: &WindowSample) -> FeatureBundle {
        FallbackProvider::new(4).provide(s).unwrap()
    }

    #[test]
    fn five_turn_window() {
        use Role::*;
        let s = sample(&[User, Agent, User, Agent, User]);
        let g = build_graph(&s, &fallback(&s), &StrategySet::esconv(), GraphOptions::default())
            .unwrap();
        assert_eq!(g.n_nodes(), 6);
        use NodeKind::*;
        assert_eq!(g.kinds(), &[Emotion, Strategy, Emotion, Strategy, Emotion, Dummy]);
        let into_dummy: Vec<EdgeKind> = g.in_edges(5).map(|e| e.kind).collect();
        assert_eq!(into_dummy.iter().filter(|k| **k == EdgeKind::SelfReference).count(), 2);
        assert_eq!(into_dummy.iter().filter(|k| **k == EdgeKind::InterReference).count(), 3);
        validate_graph(&g).unwrap();
    }

    #[test]
    fn figure_three_snippet() {
        // user (frustrated) -> agent (Question) -> user (joy) -> target
        use Role::*;
        let mut s = sample(&[User, Agent, User]);
        s.history[0].text = "I am so frustrated with my boss".into();
        s.history[1].strategy = Some(0);
        s.history[2].text = "thanks, that makes me happy".into();
        let g = build_graph(&s, &fallback(&s), &StrategySet::esconv(), GraphOptions::default())
            .unwrap();
        let kinds: Vec<EdgeKind> = g.in_edges(g.dummy()).map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            vec![EdgeKind::InterReference, EdgeKind::SelfReference, EdgeKind::InterReference]
        );
    }

    #[test]
    fn single_user_turn() {
        let s = sample(&[Role::User]);
        let g = build_graph(&s, &fallback(&s), &StrategySet::esconv(), GraphOptions::default())
            .unwrap();
        assert_eq!(g.n_nodes(), 2);
        assert_eq!(g.edges().len(), 1);
        assert_eq!(g.edges()[0].kind, EdgeKind::InterReference);
    }

    #[test]
    fn mismatched_bundle_is_rejected() {
        let s = sample(&[Role::User]);
        let mut b = fallback(&s);
        b.target_position = 7;
        assert!(matches!(
            build_graph(&s, &b, &StrategySet::esconv(), GraphOptions::default()),
            Err(GraphError::Mismatch(..))
        ));
    }

    #[test]
    fn discourse_into_dummy_is_rejected() {
        let s = sample(&[Role::User, Role::Agent]);
        let mut b = fallback(&s);
        b.discourse.push(DiscourseEdge {
            src: 0,
            dst: 2,
            relation: 0,
        });
        assert!(matches!(
            build_graph(&s, &b, &StrategySet::esconv(), GraphOptions::default()),
            Err(GraphError::DiscourseRange(0, 2))
        ));
    }

    #[test]
    fn reverse_toggle_mirrors_discourse() {
        let s = sample(&[Role::User, Role::Agent, Role::User]);
        let opts = GraphOptions {
            reverse_discourse: true,
            ..Default::default()
        };
        let g = build_graph(&s, &fallback(&s), &StrategySet::esconv(), opts).unwrap();
        let disc: Vec<_> = g.edges().iter().filter(|e| !e.kind.is_aggregation()).collect();
        assert_eq!(disc.len(), 4);
        validate_graph(&g).unwrap();
    }

    #[test]
    fn sequential_option_replaces_parsed_edges() {
        let s = sample(&[Role::User, Role::Agent, Role::User]);
        let mut b = fallback(&s);
        b.discourse = vec![DiscourseEdge {
            src: 0,
            dst: 2,
            relation: 2,
        }];
        let opts = GraphOptions {
            sequential_discourse: true,
            ..Default::default()
        };
        let g = build_graph(&s, &b, &StrategySet::esconv(), opts).unwrap();
        let disc: Vec<_> = g
            .edges()
            .iter()
            .filter(|e| !e.kind.is_aggregation())
            .map(|e| (e.src, e.dst, e.kind.name()))
            .collect();
        assert_eq!(disc, vec![(0, 1, "Continuation"), (1, 2, "Continuation")]);
    }

    #[test]
    fn missing_self_reference_is_reported() {
        let s = sample(&[Role::User, Role::Agent, Role::User]);
        let g = build_graph(&s, &fallback(&s), &StrategySet::esconv(), GraphOptions::default())
            .unwrap();
        let edges: Vec<Edge> = g
            .edges()
            .iter()
            .copied()
            .filter(|e| e.kind != EdgeKind::SelfReference)
            .collect();
        let broken = HeteroGraph::from_parts(g.kinds.clone(), g.payloads.clone(), edges);
        let v = validate_graph(&broken).unwrap_err();
        assert_eq!(
            v,
            vec![Violation::MissingAggregation {
                node: 1,
                kind: EdgeKind::SelfReference
            }]
        );
    }

    #[test]
    fn duplicate_discourse_is_reported() {
        let s = sample(&[Role::User, Role::Agent]);
        let g = build_graph(&s, &fallback(&s), &StrategySet::esconv(), GraphOptions::default())
            .unwrap();
        let mut edges = g.edges().to_vec();
        edges.push(edges.iter().copied().find(|e| !e.kind.is_aggregation()).unwrap());
        let broken = HeteroGraph::from_parts(g.kinds.clone(), g.payloads.clone(), edges);
        let v = validate_graph(&broken).unwrap_err();
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::Duplicate(_)));
    }

    #[test]
    fn dump_lists_every_edge() {
        let s = sample(&[Role::User, Role::Agent]);
        let g = build_graph(&s, &fallback(&s), &StrategySet::esconv(), GraphOptions::default())
            .unwrap();
        let d = g.dump();
        assert_eq!(d.lines().filter(|l| l.starts_with("edge ")).count(), g.edges().len());
        assert!(d.contains("self_reference"));
    }

    fn arb_case() -> impl Strategy<Value = (Vec<bool>, Vec<(usize, usize, usize)>)> {
        prop::collection::vec(any::<bool>(), 1..6).prop_flat_map(|roles| {
            let n = roles.len();
            let edges = prop::collection::vec((0..n, 0..n, 0usize..16), 0..8);
            (Just(roles), edges)
        })
    }

    proptest! {
        #[test]
        fn build_is_total_and_canonical((roles, raw) in arb_case(), rename in "[a-z]{1,6}") {
            let roles: Vec<Role> = roles
                .into_iter()
                .map(|a| if a { Role::Agent } else { Role::User })
                .collect();
            let s = sample(&roles);
            let mut b = fallback(&s);
            b.discourse = raw
                .iter()
                .filter(|(a, c, _)| a != c)
                .map(|&(src, dst, relation)| DiscourseEdge { src, dst, relation })
                .collect();
            b.emotions = s.user_turns().map(|i| EmotionLogits { turn_index: i, z: vec![0.0; 7] }).collect();
            let set = StrategySet::esconv();
            let g = build_graph(&s, &b, &set, GraphOptions::default()).unwrap();
            prop_assert!(validate_graph(&g).is_ok());
            let aggregation_in = g.in_edges(g.dummy()).filter(|e| e.kind.is_aggregation()).count();
            prop_assert_eq!(aggregation_in, g.n_nodes() - 1);

            let mut s2 = s.clone();
            s2.dialogue_id = rename;
            let mut b2 = b.clone();
            b2.dialogue_id = s2.dialogue_id.clone();
            b2.discourse.reverse();
            let g2 = build_graph(&s2, &b2, &set, GraphOptions::default()).unwrap();
            prop_assert_eq!(g, g2);
        }
    }
}
