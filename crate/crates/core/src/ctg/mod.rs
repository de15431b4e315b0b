//! Conjugate task graphs: action nodes plus a START node, with hard or soft
//! adjacency. Graphs are values; every operation returns a new graph.

mod oracle;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::env::ActionId;

pub use oracle::{goal_distance, oracle_graph, shortest_sequences, OracleOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("action sequence is empty")]
    EmptySequence,
    #[error("node {0} is not in the graph")]
    UnknownNode(NodeKey),
    #[error("cannot mix soft and hard graphs in a union")]
    MixedKinds,
    #[error("graphs belong to different tasks ({0:?} vs {1:?})")]
    TaskMismatch(Option<u64>, Option<u64>),
    #[error("union of zero graphs")]
    EmptyUnion,
    #[error("edges into START are not allowed")]
    EdgeIntoStart,
    #[error("weight {0} outside [0, 1]")]
    WeightOutOfRange(f64),
    #[error("oracle search exceeded its budget of {0} states")]
    BudgetExceeded(usize),
    #[error("oracle found no successful sequence")]
    NoSolution,
    #[error("environment error: {0}")]
    Env(#[from] crate::env::EnvError),
    #[error("malformed graph: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKey {
    Start,
    Action(ActionId),
}

impl std::fmt::Display for NodeKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeKey::Start => f.write_str("START"),
            NodeKey::Action(a) => write!(f, "{a}"),
        }
    }
}

impl Serialize for NodeKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            NodeKey::Start => s.serialize_str("START"),
            NodeKey::Action(a) => s.serialize_u32(a.0),
        }
    }
}

impl<'de> Deserialize<'de> for NodeKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Id(u32),
            Name(String),
        }
        match Repr::deserialize(d)? {
            Repr::Id(i) => Ok(NodeKey::Action(ActionId(i))),
            Repr::Name(n) if n == "START" => Ok(NodeKey::Start),
            Repr::Name(n) => Err(serde::de::Error::custom(format!("unknown node `{n}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Hard,
    Soft,
}

/// Nodes are START followed by action nodes in ascending id order; the
/// adjacency is a row-major `n × n` matrix (row = source). Serializes as
/// [`GraphJson`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "GraphJson", try_from = "GraphJson")]
pub struct ConjugateTaskGraph {
    task_id: Option<u64>,
    kind: EdgeKind,
    nodes: Vec<NodeKey>,
    weights: Vec<f64>,
}

impl ConjugateTaskGraph {
    /// Edgeless hard graph over START and `actions`.
    pub fn empty(task_id: Option<u64>, actions: impl IntoIterator<Item = ActionId>) -> Self {
        Self::with_kind(task_id, EdgeKind::Hard, actions)
    }

    pub fn with_kind(task_id: Option<u64>, kind: EdgeKind, actions: impl IntoIterator<Item = ActionId>) -> Self {
        let set: BTreeSet<ActionId> = actions.into_iter().collect();
        let nodes: Vec<NodeKey> = std::iter::once(NodeKey::Start)
            .chain(set.into_iter().map(NodeKey::Action))
            .collect();
        let n = nodes.len();
        Self {
            task_id,
            kind,
            nodes,
            weights: vec![0.0; n * n],
        }
    }

    /// START → a₁ plus every consecutive transition, deduplicated.
    pub fn path_from_actions(task_id: Option<u64>, actions: &[ActionId]) -> Result<Self, GraphError> {
        let first = *actions.first().ok_or(GraphError::EmptySequence)?;
        let mut g = Self::empty(task_id, actions.iter().copied());
        g.set_edge(NodeKey::Start, NodeKey::Action(first), 1.0)?;
        for w in actions.windows(2) {
            g.set_edge(NodeKey::Action(w[0]), NodeKey::Action(w[1]), 1.0)?;
        }
        Ok(g)
    }

    /// Every edge among `actions` (self-loops optional) plus START → every action.
    pub fn fully_connected(task_id: Option<u64>, actions: impl IntoIterator<Item = ActionId>, self_loops: bool) -> Self {
        let mut g = Self::empty(task_id, actions);
        let n = g.nodes.len();
        for i in 0..n {
            for j in 1..n {
                if i != j || self_loops {
                    g.weights[i * n + j] = 1.0;
                }
            }
        }
        g
    }

    /// Builds a graph from an explicit matrix over START + sorted `actions`.
    pub fn from_matrix(task_id: Option<u64>, kind: EdgeKind, actions: &[ActionId], weights: Vec<f64>) -> Result<Self, GraphError> {
        let mut g = Self::with_kind(task_id, kind, actions.iter().copied());
        if g.nodes.len() != actions.len() + 1 {
            return Err(GraphError::Malformed("duplicate action nodes".into()));
        }
        if !actions.windows(2).all(|w| w[0] < w[1]) {
            return Err(GraphError::Malformed("actions must be ascending".into()));
        }
        let n = g.nodes.len();
        if weights.len() != n * n {
            return Err(GraphError::Malformed(format!("expected {} weights, got {}", n * n, weights.len())));
        }
        for (k, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                g.set_edge(g.nodes[k / n], g.nodes[k % n], w)?;
            }
        }
        Ok(g)
    }

    pub fn task_id(&self) -> Option<u64> {
        self.task_id
    }

    pub fn kind(&self) -> EdgeKind {
        self.kind
    }

    pub fn is_soft(&self) -> bool {
        self.kind == EdgeKind::Soft
    }

    pub fn nodes(&self) -> &[NodeKey] {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn actions(&self) -> Vec<ActionId> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                NodeKey::Action(a) => Some(*a),
                NodeKey::Start => None,
            })
            .collect()
    }

    pub fn index_of(&self, node: NodeKey) -> Option<usize> {
        self.nodes.binary_search(&node).ok()
    }

    pub fn contains(&self, node: NodeKey) -> bool {
        self.index_of(node).is_some()
    }

    /// Row-major weights in node order.
    pub fn matrix(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, from: NodeKey, to: NodeKey) -> f64 {
        match (self.index_of(from), self.index_of(to)) {
            (Some(i), Some(j)) => self.weights[i * self.nodes.len() + j],
            _ => 0.0,
        }
    }

    /// An edge exists when its weight is positive.
    pub fn has_edge(&self, from: NodeKey, to: NodeKey) -> bool {
        self.weight(from, to) > 0.0
    }

    pub fn set_edge(&mut self, from: NodeKey, to: NodeKey, weight: f64) -> Result<(), GraphError> {
        if to == NodeKey::Start {
            return Err(GraphError::EdgeIntoStart);
        }
        if !(0.0..=1.0).contains(&weight) {
            return Err(GraphError::WeightOutOfRange(weight));
        }
        let i = self.index_of(from).ok_or(GraphError::UnknownNode(from))?;
        let j = self.index_of(to).ok_or(GraphError::UnknownNode(to))?;
        let n = self.nodes.len();
        self.weights[i * n + j] = match self.kind {
            EdgeKind::Hard => {
                if weight > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            EdgeKind::Soft => weight,
        };
        Ok(())
    }

    /// Edges with positive weight, sorted by (source, target).
    pub fn edges(&self) -> Vec<(NodeKey, NodeKey)> {
        let n = self.nodes.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.weights[i * n + j] > 0.0 {
                    out.push((self.nodes[i], self.nodes[j]));
                }
            }
        }
        out
    }

    pub fn edge_set(&self) -> BTreeSet<(NodeKey, NodeKey)> {
        self.edges().into_iter().collect()
    }

    pub fn edge_count(&self) -> usize {
        self.weights.iter().filter(|w| **w > 0.0).count()
    }

    /// Successors of `node` in ascending action order.
    pub fn outgoing(&self, node: NodeKey) -> Result<Vec<ActionId>, GraphError> {
        let i = self.index_of(node).ok_or(GraphError::UnknownNode(node))?;
        let n = self.nodes.len();
        Ok((0..n)
            .filter(|&j| self.weights[i * n + j] > 0.0)
            .filter_map(|j| match self.nodes[j] {
                NodeKey::Action(a) => Some(a),
                NodeKey::Start => None,
            })
            .collect())
    }

    /// Hard graph keeping edges with weight ≥ `threshold`.
    pub fn threshold(&self, threshold: f64) -> Self {
        Self {
            task_id: self.task_id,
            kind: EdgeKind::Hard,
            nodes: self.nodes.clone(),
            weights: self
                .weights
                .iter()
                .map(|&w| if w > 0.0 && w >= threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// True when every edge of `self` is an edge of `other`.
    pub fn is_subgraph_of(&self, other: &Self) -> bool {
        self.edges().into_iter().all(|(a, b)| other.has_edge(a, b))
    }

    /// Same node set as `self` extended with `extra` actions.
    pub fn with_nodes(&self, extra: impl IntoIterator<Item = ActionId>) -> Self {
        let mut g = Self::with_kind(self.task_id, self.kind, self.actions().into_iter().chain(extra));
        let n = g.nodes.len();
        let m = self.nodes.len();
        for i in 0..m {
            for j in 0..m {
                let w = self.weights[i * m + j];
                if w > 0.0 {
                    let (a, b) = (g.index_of(self.nodes[i]).unwrap(), g.index_of(self.nodes[j]).unwrap());
                    g.weights[a * n + b] = w;
                }
            }
        }
        g
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GraphJson::from(self)).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let j: GraphJson = serde_json::from_str(text).map_err(|e| GraphError::Malformed(e.to_string()))?;
        Self::try_from(j)
    }
}

/// Edge-level precision / recall / F1 of a predicted graph against a truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeMetrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl EdgeMetrics {
    pub fn compare(predicted: &ConjugateTaskGraph, truth: &ConjugateTaskGraph) -> Self {
        let p = predicted.edge_set();
        let t = truth.edge_set();
        let tp = p.intersection(&t).count();
        Self {
            true_positives: tp,
            false_positives: p.len() - tp,
            false_negatives: t.len() - tp,
        }
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            true_positives: self.true_positives + other.true_positives,
            false_positives: self.false_positives + other.false_positives,
            false_negatives: self.false_negatives + other.false_negatives,
        }
    }

    /// 1.0 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        let d = self.true_positives + self.false_positives;
        if d == 0 {
            1.0
        } else {
            self.true_positives as f64 / d as f64
        }
    }

    /// 1.0 when there was nothing to find.
    pub fn recall(&self) -> f64 {
        let d = self.true_positives + self.false_negatives;
        if d == 0 {
            1.0
        } else {
            self.true_positives as f64 / d as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Union of graphs over the union of their node sets: OR for hard graphs,
/// elementwise max for soft graphs. All graphs must share a task id unless
/// `task_override` is given.
pub fn union_graphs(graphs: &[ConjugateTaskGraph], task_override: Option<Option<u64>>) -> Result<ConjugateTaskGraph, GraphError> {
    let first = graphs.first().ok_or(GraphError::EmptyUnion)?;
    let kind = first.kind;
    let task_id = match task_override {
        Some(t) => t,
        None => {
            for g in graphs {
                if g.task_id != first.task_id {
                    return Err(GraphError::TaskMismatch(first.task_id, g.task_id));
                }
            }
            first.task_id
        }
    };
    if graphs.iter().any(|g| g.kind != kind) {
        return Err(GraphError::MixedKinds);
    }
    let mut out = ConjugateTaskGraph::with_kind(task_id, kind, graphs.iter().flat_map(|g| g.actions()));
    let n = out.nodes.len();
    for g in graphs {
        let m = g.nodes.len();
        let map: Vec<usize> = g.nodes.iter().map(|k| out.index_of(*k).unwrap()).collect();
        for i in 0..m {
            for j in 0..m {
                let w = g.weights[i * m + j];
                let slot = &mut out.weights[map[i] * n + map[j]];
                *slot = slot.max(w);
            }
        }
    }
    Ok(out)
}

/// Graphviz rendering with nodes and edges in sorted order.
pub fn to_dot(graph: &ConjugateTaskGraph, label: &dyn Fn(ActionId) -> String) -> String {
    let mut out = String::new();
    let name = match graph.task_id {
        Some(t) => format!("task_{t}"),
        None => "ctg".to_string(),
    };
    let _ = writeln!(out, "digraph {name} {{");
    let _ = writeln!(out, "  rankdir=LR;");
    for node in &graph.nodes {
        match node {
            NodeKey::Start => {
                let _ = writeln!(out, "  start [label=\"START\", shape=doublecircle];");
            }
            NodeKey::Action(a) => {
                let _ = writeln!(out, "  n{} [label=\"{}\", shape=box];", a.0, escape(&label(*a)));
            }
        }
    }
    for (a, b) in graph.edges() {
        let id = |k: NodeKey| match k {
            NodeKey::Start => "start".to_string(),
            NodeKey::Action(x) => format!("n{}", x.0),
        };
        if graph.is_soft() {
            let _ = writeln!(out, "  {} -> {} [label=\"{:.2}\"];", id(a), id(b), graph.weight(a, b));
        } else {
            let _ = writeln!(out, "  {} -> {};", id(a), id(b));
        }
    }
    out.push_str("}\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// On-disk form: node list and `[source, target, weight]` triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphJson {
    pub task_id: Option<u64>,
    pub kind: EdgeKind,
    pub nodes: Vec<NodeKey>,
    pub edges: Vec<(NodeKey, NodeKey, f64)>,
}

impl From<&ConjugateTaskGraph> for GraphJson {
    fn from(g: &ConjugateTaskGraph) -> Self {
        Self {
            task_id: g.task_id,
            kind: g.kind,
            nodes: g.nodes.clone(),
            edges: g.edges().into_iter().map(|(a, b)| (a, b, g.weight(a, b))).collect(),
        }
    }
}

impl From<ConjugateTaskGraph> for GraphJson {
    fn from(g: ConjugateTaskGraph) -> Self {
        (&g).into()
    }
}

impl TryFrom<GraphJson> for ConjugateTaskGraph {
    type Error = GraphError;

    fn try_from(j: GraphJson) -> Result<Self, GraphError> {
        if j.nodes.first() != Some(&NodeKey::Start) {
            return Err(GraphError::Malformed("first node must be START".into()));
        }
        let actions: Vec<ActionId> = j.nodes[1..]
            .iter()
            .map(|n| match n {
                NodeKey::Action(a) => Ok(*a),
                NodeKey::Start => Err(GraphError::Malformed("duplicate START".into())),
            })
            .collect::<Result<_, _>>()?;
        if !actions.windows(2).all(|w| w[0] < w[1]) {
            return Err(GraphError::Malformed("action nodes must be strictly ascending".into()));
        }
        let mut g = ConjugateTaskGraph::with_kind(j.task_id, j.kind, actions);
        for (a, b, w) in j.edges {
            g.set_edge(a, b, w)?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn a(i: u32) -> NodeKey {
        NodeKey::Action(ActionId(i))
    }

    fn ids(v: &[u32]) -> Vec<ActionId> {
        v.iter().map(|&i| ActionId(i)).collect()
    }

    #[test]
    fn single_action_path() {
        let g = ConjugateTaskGraph::path_from_actions(None, &ids(&[4])).unwrap();
        assert_eq!(g.nodes(), &[NodeKey::Start, a(4)]);
        assert_eq!(g.edges(), vec![(NodeKey::Start, a(4))]);
    }

    #[test]
    fn revisited_node_path() {
        let g = ConjugateTaskGraph::path_from_actions(Some(1), &ids(&[0, 1, 0, 2])).unwrap();
        let expect: BTreeSet<_> = [(NodeKey::Start, a(0)), (a(0), a(1)), (a(1), a(0)), (a(0), a(2))]
            .into_iter()
            .collect();
        assert_eq!(g.edge_set(), expect);
        assert_eq!(g.nodes().len(), 4);
        assert_eq!(g.outgoing(a(0)).unwrap(), ids(&[1, 2]));
        assert!(matches!(
            ConjugateTaskGraph::path_from_actions(None, &[]),
            Err(GraphError::EmptySequence)
        ));
    }

    #[test]
    fn outgoing_queries() {
        let g = ConjugateTaskGraph::path_from_actions(None, &ids(&[3, 7])).unwrap();
        assert_eq!(g.outgoing(NodeKey::Start).unwrap(), ids(&[3]));
        assert!(g.outgoing(a(7)).unwrap().is_empty());
        assert!(matches!(g.outgoing(a(9)), Err(GraphError::UnknownNode(_))));
    }

    #[test]
    fn opposite_orders_union() {
        let p = ConjugateTaskGraph::path_from_actions(None, &ids(&[0, 1])).unwrap();
        let q = ConjugateTaskGraph::path_from_actions(None, &ids(&[1, 0])).unwrap();
        let u = union_graphs(&[p, q], None).unwrap();
        let expect: BTreeSet<_> = [(NodeKey::Start, a(0)), (a(0), a(1)), (NodeKey::Start, a(1)), (a(1), a(0))]
            .into_iter()
            .collect();
        assert_eq!(u.edge_set(), expect);
    }

    #[test]
    fn union_rejects_mixed_and_mismatched() {
        let p = ConjugateTaskGraph::path_from_actions(Some(1), &ids(&[0])).unwrap();
        let s = ConjugateTaskGraph::with_kind(Some(1), EdgeKind::Soft, ids(&[0]));
        assert_eq!(union_graphs(&[p.clone(), s], None), Err(GraphError::MixedKinds));
        let q = ConjugateTaskGraph::path_from_actions(Some(2), &ids(&[0])).unwrap();
        assert!(matches!(
            union_graphs(&[p.clone(), q.clone()], None),
            Err(GraphError::TaskMismatch(..))
        ));
        assert!(union_graphs(&[p, q], Some(None)).is_ok());
    }

    #[test]
    fn no_edges_into_start() {
        let mut g = ConjugateTaskGraph::empty(None, ids(&[0]));
        assert_eq!(g.set_edge(a(0), NodeKey::Start, 1.0), Err(GraphError::EdgeIntoStart));
        let fc = ConjugateTaskGraph::fully_connected(None, ids(&[0, 1, 2]), true);
        assert_eq!(fc.edge_count(), 3 + 9);
        assert!(fc.edges().iter().all(|(_, b)| *b != NodeKey::Start));
    }

    #[test]
    fn dot_output() {
        let g = ConjugateTaskGraph::empty(None, []);
        let d = to_dot(&g, &|x| x.to_string());
        assert_eq!(d.matches("shape=").count(), 1);
        let p = ConjugateTaskGraph::path_from_actions(Some(4), &ids(&[2, 1])).unwrap();
        let d1 = to_dot(&p, &|x| format!("act {}", x.0));
        assert_eq!(d1, to_dot(&p, &|x| format!("act {}", x.0)));
        let start_edge = d1.find("start -> n2").unwrap();
        let second = d1.find("n2 -> n1").unwrap();
        assert!(start_edge < second);
        let mut s = ConjugateTaskGraph::with_kind(None, EdgeKind::Soft, ids(&[0]));
        s.set_edge(NodeKey::Start, a(0), 0.456).unwrap();
        assert!(to_dot(&s, &|x| x.to_string()).contains("[label=\"0.46\"]"));
    }

    #[test]
    fn json_round_trip() {
        let mut s = ConjugateTaskGraph::with_kind(Some(9), EdgeKind::Soft, ids(&[0, 5]));
        s.set_edge(NodeKey::Start, a(0), 0.1 + 0.2).unwrap();
        s.set_edge(a(0), a(5), 1e-300).unwrap();
        let back = ConjugateTaskGraph::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        assert!(ConjugateTaskGraph::from_json(r#"{"task_id":null,"kind":"hard","nodes":[3],"edges":[]}"#).is_err());
    }

    fn arb_path() -> impl Strategy<Value = ConjugateTaskGraph> {
        proptest::collection::vec(0u32..6, 1..8).prop_map(|v| ConjugateTaskGraph::path_from_actions(None, &ids(&v)).unwrap())
    }

    proptest! {
        #[test]
        fn union_is_idempotent_commutative_associative(p in arb_path(), q in arb_path(), r in arb_path()) {
            let u = |gs: &[ConjugateTaskGraph]| union_graphs(gs, None).unwrap();
            prop_assert_eq!(u(&[p.clone(), p.clone()]), p.clone());
            prop_assert_eq!(u(&[p.clone(), q.clone()]), u(&[q.clone(), p.clone()]));
            prop_assert_eq!(u(&[u(&[p.clone(), q.clone()]), r.clone()]), u(&[p.clone(), u(&[q.clone(), r.clone()])]));
            let all = u(&[p.clone(), q.clone(), r.clone()]);
            prop_assert!(p.is_subgraph_of(&all));
        }

        #[test]
        fn path_invariants(v in proptest::collection::vec(0u32..6, 1..12)) {
            let g = ConjugateTaskGraph::path_from_actions(None, &ids(&v)).unwrap();
            prop_assert!(g.edge_count() <= v.len());
            for node in g.nodes().iter().skip(1) {
                prop_assert!(g.nodes().iter().any(|m| g.has_edge(*m, *node)));
            }
        }
    }
}
