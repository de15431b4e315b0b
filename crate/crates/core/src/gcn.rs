//! Graph completion network.
//!
//! Starting from a demonstrated path, `T` rounds of
//!
//! ```text
//! C'_ij = (1 - C_ij) f_set(N_i, N_j) + C_ij f_reset(N_i, N_j)
//! a_i   = Σ_j C_ij f_f(N_j) + C_ji f_b(N_j)
//! N'_i  = gru(a_i, N_i)
//! ```
//!
//! turn the path adjacency into edge strengths for every ordered node pair.
//! `f_set` / `f_reset` are sigmoid-squashed pair scorers
//! `σ(wᵀ tanh(A N_i + B N_j + b) + c)`; node embeddings start from a learned
//! per-action table with a dedicated START row.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctg::{ConjugateTaskGraph, EdgeKind, EdgeMetrics, GraphError, NodeKey};
use crate::nn::{load_checkpoint, save_checkpoint, Activation, GruCell, Mlp, ModuleParams, NnError, ParamId, StoreId, Tape, Var};
use crate::train::{fit_with_hook, EpochLog, ModelError, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub hidden: usize,
    pub iterations: usize,
    pub threshold: f64,
    pub train: TrainConfig,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            iterations: 3,
            threshold: 0.5,
            train: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
        }
    }
}

/// A path and the union graph it should be completed into, restricted to
/// the path's nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnTrainingPair {
    pub input: ConjugateTaskGraph,
    pub target: ConjugateTaskGraph,
}

impl GcnTrainingPair {
    pub fn new(input: ConjugateTaskGraph, target: &ConjugateTaskGraph) -> Result<Self, ModelError> {
        if !input.is_subgraph_of(target) {
            return Err(ModelError::Data(format!(
                "input path of task {:?} is not a subgraph of its target",
                input.task_id()
            )));
        }
        let mut t = ConjugateTaskGraph::empty(input.task_id(), input.actions());
        for &a in input.nodes() {
            for &b in input.nodes() {
                if target.has_edge(a, b) {
                    t.set_edge(a, b, 1.0)?;
                }
            }
        }
        Ok(Self { input, target: t })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct PairHead {
    a: ParamId,
    b: ParamId,
    bias: ParamId,
    w: ParamId,
    c: ParamId,
}

impl PairHead {
    fn new(params: &mut ModuleParams, name: &str, d: usize) -> Result<Self, NnError> {
        Ok(Self {
            a: params.add_weight(&format!("{name}.a"), d, d)?,
            b: params.add_weight(&format!("{name}.b"), d, d)?,
            bias: params.add_bias(&format!("{name}.bias"), d)?,
            w: params.add_weight(&format!("{name}.w"), 1, d)?,
            c: params.add_bias(&format!("{name}.c"), 1)?,
        })
    }

    fn attach(params: &ModuleParams, name: &str) -> Result<Self, NnError> {
        Ok(Self {
            a: params.id(&format!("{name}.a"))?,
            b: params.id(&format!("{name}.b"))?,
            bias: params.id(&format!("{name}.bias"))?,
            w: params.id(&format!("{name}.w"))?,
            c: params.id(&format!("{name}.c"))?,
        })
    }

    /// Per-node halves of the pair MLP: `(A N_i + b, B N_j)`.
    fn project(&self, tape: &mut Tape<'_>, s: StoreId, nodes: &[Var]) -> Result<(Vec<Var>, Vec<Var>), NnError> {
        let bias = tape.param(s, self.bias);
        let mut src = Vec::with_capacity(nodes.len());
        let mut dst = Vec::with_capacity(nodes.len());
        for &n in nodes {
            let p = tape.matvec(s, self.a, n)?;
            src.push(tape.add(p, bias)?);
            dst.push(tape.matvec(s, self.b, n)?);
        }
        Ok((src, dst))
    }

    fn score(&self, tape: &mut Tape<'_>, s: StoreId, src: Var, dst: Var) -> Result<Var, NnError> {
        let h = tape.add(src, dst)?;
        let h = tape.tanh(h);
        let z = tape.matvec(s, self.w, h)?;
        let c = tape.param(s, self.c);
        let z = tape.add(z, c)?;
        Ok(tape.sigmoid(z))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct GcnNet {
    vocab: usize,
    ne: ParamId,
    set: PairHead,
    reset: PairHead,
    ff: Mlp,
    fb: Mlp,
    rnn: GruCell,
}

impl GcnNet {
    fn build(params: &mut ModuleParams, vocab: usize, d: usize) -> Result<Self, NnError> {
        Ok(Self {
            vocab,
            ne: params.add_weight("ne_gcn", vocab + 1, d)?,
            set: PairHead::new(params, "f_set", d)?,
            reset: PairHead::new(params, "f_reset", d)?,
            ff: Mlp::new(params, "f_f", &[d, d], Activation::Tanh, Activation::Tanh)?,
            fb: Mlp::new(params, "f_b", &[d, d], Activation::Tanh, Activation::Tanh)?,
            rnn: GruCell::new(params, "rnn", d, d)?,
        })
    }

    fn attach(params: &ModuleParams) -> Result<Self, NnError> {
        let ne = params.id("ne_gcn")?;
        Ok(Self {
            vocab: params.get(ne).rows() - 1,
            ne,
            set: PairHead::attach(params, "f_set")?,
            reset: PairHead::attach(params, "f_reset")?,
            ff: Mlp::attach(params, "f_f", 1, Activation::Tanh, Activation::Tanh)?,
            fb: Mlp::attach(params, "f_b", 1, Activation::Tanh, Activation::Tanh)?,
            rnn: GruCell::attach(params, "rnn")?,
        })
    }

    fn row_of(&self, node: NodeKey) -> Result<usize, GraphError> {
        match node {
            NodeKey::Start => Ok(self.vocab),
            NodeKey::Action(a) if a.index() < self.vocab => Ok(a.index()),
            other => Err(GraphError::UnknownNode(other)),
        }
    }

    /// Runs `iterations` rounds from adjacency `c0` over embedding rows
    /// `rows` (any order). Returns the `n × n` strengths and final embeddings.
    fn propagate(
        &self,
        tape: &mut Tape<'_>,
        s: StoreId,
        rows: &[usize],
        c0: &[f64],
        iterations: usize,
    ) -> Result<(Vec<Var>, Vec<Var>), NnError> {
        let n = rows.len();
        let mut nodes = rows.iter().map(|&r| tape.row(s, self.ne, r)).collect::<Result<Vec<_>, _>>()?;
        let mut c: Vec<Var> = c0.iter().map(|&v| tape.input(vec![v])).collect();
        for _ in 0..iterations {
            let (set_src, set_dst) = self.set.project(tape, s, &nodes)?;
            let (reset_src, reset_dst) = self.reset.project(tape, s, &nodes)?;
            let mut next = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    let fs = self.set.score(tape, s, set_src[i], set_dst[j])?;
                    let fr = self.reset.score(tape, s, reset_src[i], reset_dst[j])?;
                    // (1 - C) f_set + C f_reset = f_set + C (f_reset - f_set)
                    let d = tape.sub(fr, fs)?;
                    let m = tape.mul(c[i * n + j], d)?;
                    next.push(tape.add(fs, m)?);
                }
            }
            let fwd = nodes.iter().map(|&v| self.ff.forward(tape, s, v)).collect::<Result<Vec<_>, _>>()?;
            let bwd = nodes.iter().map(|&v| self.fb.forward(tape, s, v)).collect::<Result<Vec<_>, _>>()?;
            let mut updated = Vec::with_capacity(n);
            for i in 0..n {
                let out_w: Vec<Var> = (0..n).map(|j| c[i * n + j]).collect();
                let in_w: Vec<Var> = (0..n).map(|j| c[j * n + i]).collect();
                let out_w = tape.concat(&out_w);
                let in_w = tape.concat(&in_w);
                let a_out = tape.mix(out_w, &fwd)?;
                let a_in = tape.mix(in_w, &bwd)?;
                let a = tape.add(a_out, a_in)?;
                updated.push(self.rnn.step(tape, s, a, nodes[i])?);
            }
            nodes = updated;
            c = next;
        }
        Ok((c, nodes))
    }
}

/// Soft strengths and final node embeddings for one graph, in the graph's
/// node order.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnOutput {
    pub nodes: Vec<NodeKey>,
    /// Row-major `n × n`, including the (unused) START column.
    pub strengths: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
}

impl GcnOutput {
    pub fn strength(&self, from: NodeKey, to: NodeKey) -> Option<f64> {
        let n = self.nodes.len();
        let i = self.nodes.binary_search(&from).ok()?;
        let j = self.nodes.binary_search(&to).ok()?;
        Some(self.strengths[i * n + j])
    }

    pub fn embedding(&self, node: NodeKey) -> Option<&[f64]> {
        self.nodes.binary_search(&node).ok().map(|i| self.embeddings[i].as_slice())
    }

    /// Soft graph (edges into START dropped).
    pub fn soft_graph(&self, task_id: Option<u64>) -> Result<ConjugateTaskGraph, GraphError> {
        let actions: Vec<_> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                NodeKey::Action(a) => Some(*a),
                NodeKey::Start => None,
            })
            .collect();
        let mut g = ConjugateTaskGraph::with_kind(task_id, EdgeKind::Soft, actions);
        let n = self.nodes.len();
        for i in 0..n {
            for j in 1..n {
                g.set_edge(self.nodes[i], self.nodes[j], self.strengths[i * n + j])?;
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GcnTrainLog {
    pub epochs: Vec<EpochLog>,
    /// Training-set edge metrics after each epoch (on a fixed subsample).
    pub edges: Vec<EdgeMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub config: GcnConfig,
    pub params: ModuleParams,
    net: GcnNet,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    component: String,
    config: GcnConfig,
}

const METRIC_SAMPLE: usize = 64;

impl GcnParams {
    pub fn new(vocab: usize, config: GcnConfig, seed: u64) -> Result<Self, ModelError> {
        let mut params = ModuleParams::new(seed);
        let net = GcnNet::build(&mut params, vocab, config.hidden)?;
        Ok(Self { config, params, net })
    }

    pub fn vocab(&self) -> usize {
        self.net.vocab
    }

    fn rows(&self, graph: &ConjugateTaskGraph) -> Result<Vec<usize>, ModelError> {
        Ok(graph.nodes().iter().map(|&n| self.net.row_of(n)).collect::<Result<Vec<_>, _>>()?)
    }

    pub fn forward(&self, graph: &ConjugateTaskGraph) -> Result<GcnOutput, ModelError> {
        self.forward_iterations(graph, self.config.iterations)
    }

    pub fn forward_iterations(&self, graph: &ConjugateTaskGraph, iterations: usize) -> Result<GcnOutput, ModelError> {
        let rows = self.rows(graph)?;
        let mut tape = Tape::new();
        let s = tape.bind(&self.params);
        let (c, nodes) = self.net.propagate(&mut tape, s, &rows, graph.matrix(), iterations)?;
        Ok(GcnOutput {
            nodes: graph.nodes().to_vec(),
            strengths: c.iter().map(|&v| tape.scalar(v)).collect(),
            embeddings: nodes.iter().map(|&v| tape.value(v).to_vec()).collect(),
        })
    }

    /// Forward over an explicit node ordering (used to test equivariance).
    pub fn forward_rows(&self, rows: &[usize], adjacency: &[f64]) -> Result<Vec<f64>, ModelError> {
        if adjacency.len() != rows.len() * rows.len() {
            return Err(ModelError::Data("adjacency size mismatch".into()));
        }
        let mut tape = Tape::new();
        let s = tape.bind(&self.params);
        let (c, _) = self.net.propagate(&mut tape, s, rows, adjacency, self.config.iterations)?;
        Ok(c.iter().map(|&v| tape.scalar(v)).collect())
    }

    /// Hard completion: `(C ≥ threshold) OR path`.
    pub fn complete(&self, path: &ConjugateTaskGraph, threshold: f64) -> Result<ConjugateTaskGraph, ModelError> {
        let out = self.forward(path)?;
        Self::complete_from(&out, path, threshold)
    }

    /// [`complete`](Self::complete) from an already computed forward pass.
    pub fn complete_from(out: &GcnOutput, path: &ConjugateTaskGraph, threshold: f64) -> Result<ConjugateTaskGraph, ModelError> {
        if out.nodes != path.nodes() {
            return Err(ModelError::Data("GCN output does not match the path's nodes".into()));
        }
        let nodes = path.nodes();
        let n = nodes.len();
        let mut g = ConjugateTaskGraph::empty(path.task_id(), path.actions());
        for i in 0..n {
            for j in 1..n {
                if out.strengths[i * n + j] >= threshold || path.matrix()[i * n + j] > 0.0 {
                    g.set_edge(nodes[i], nodes[j], 1.0)?;
                }
            }
        }
        Ok(g)
    }

    /// Mean BCE over ordered node pairs whose target is not START.
    pub fn pair_loss(&self, params: &ModuleParams, pair: &GcnTrainingPair) -> Result<(f64, Vec<Vec<f64>>), NnError> {
        let rows = pair
            .input
            .nodes()
            .iter()
            .map(|&n| self.net.row_of(n))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| NnError::Dimension {
                context: e.to_string(),
                expected: self.net.vocab,
                actual: 0,
            })?;
        let nodes = pair.input.nodes();
        let n = nodes.len();
        let mut tape = Tape::new();
        let s = tape.bind(params);
        let (c, _) = self
            .net
            .propagate(&mut tape, s, &rows, pair.input.matrix(), self.config.iterations)?;
        let mut ps = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if nodes[j] != NodeKey::Start {
                    ps.push(c[i * n + j]);
                    ys.push(pair.target.matrix()[i * n + j]);
                }
            }
        }
        let p = tape.concat(&ps);
        let total = tape.bce(p, &ys)?;
        let loss = tape.scale(total, 1.0 / ys.len() as f64);
        Ok((tape.scalar(loss), tape.backward(loss).into_store(s)))
    }

    pub fn train(&mut self, pairs: &[GcnTrainingPair], seed: u64) -> Result<GcnTrainLog, ModelError> {
        for p in pairs {
            self.rows(&p.input)?;
        }
        let sample: Vec<&GcnTrainingPair> = pairs.iter().take(METRIC_SAMPLE).collect();
        let mut params = self.params.clone();
        let mut edges = Vec::new();
        let threshold = self.config.threshold;
        let epochs = {
            let this = &*self;
            fit_with_hook(
                "gcn",
                &mut params,
                &self.config.train,
                seed,
                pairs,
                |p, pair| this.pair_loss(p, pair),
                |log, p| {
                    let probe = GcnParams {
                        config: this.config.clone(),
                        params: p.clone(),
                        net: this.net.clone(),
                    };
                    if let Ok(m) = probe.edge_metrics(sample.iter().copied(), threshold) {
                        log::info!(
                            "gcn epoch {}: loss {:.5} precision {:.4} recall {:.4} f1 {:.4}",
                            log.epoch,
                            log.mean_loss,
                            m.precision(),
                            m.recall(),
                            m.f1()
                        );
                        edges.push(m);
                    }
                },
            )?
        };
        self.params = params;
        Ok(GcnTrainLog { epochs, edges })
    }

    /// Pooled edge metrics of completed inputs against targets.
    pub fn edge_metrics<'p>(
        &self,
        pairs: impl IntoIterator<Item = &'p GcnTrainingPair>,
        threshold: f64,
    ) -> Result<EdgeMetrics, ModelError> {
        let mut m = EdgeMetrics::default();
        for p in pairs {
            m = m.merge(EdgeMetrics::compare(&self.complete(&p.input, threshold)?, &p.target));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let meta = serde_json::to_value(Meta {
            component: "gcn".into(),
            config: self.config.clone(),
        })
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        save_checkpoint(path, &self.params, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let ck = load_checkpoint(path)?;
        let meta: Meta = serde_json::from_value(ck.meta.clone()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if meta.component != "gcn" {
            return Err(ModelError::Checkpoint(format!("expected gcn checkpoint, found {}", meta.component)));
        }
        let params = ck.to_params()?;
        let net = GcnNet::attach(&params)?;
        Ok(Self {
            config: meta.config,
            params,
            net,
        })
    }

    /// Overwrites the gate output biases and zeroes the gate read-out
    /// weights, pinning `f_set ≡ σ(set_logit)` and `f_reset ≡ σ(reset_logit)`.
    pub fn force_gates(&mut self, set_logit: f64, reset_logit: f64) {
        for (head, logit) in [(&self.net.set, set_logit), (&self.net.reset, reset_logit)] {
            self.params.get_mut(head.w).values.iter_mut().for_each(|v| *v = 0.0);
            self.params.get_mut(head.c).values[0] = logit;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctg::union_graphs;
    use crate::env::ActionId;
    use crate::nn::{gradient_check, scaled, GradCheckOptions};

    fn acts(v: &[u32]) -> Vec<ActionId> {
        v.iter().map(|&a| ActionId(a)).collect()
    }

    fn small(seed: u64) -> GcnParams {
        GcnParams::new(
            10,
            GcnConfig {
                hidden: 8,
                ..GcnConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zero_iterations_return_input() {
        let g = ConjugateTaskGraph::path_from_actions(Some(0), &acts(&[3, 1, 4])).unwrap();
        let out = small(0).forward_iterations(&g, 0).unwrap();
        assert_eq!(out.strengths, g.matrix());
    }

    #[test]
    fn forced_gates_give_fixpoint_and_complement() {
        let g = ConjugateTaskGraph::path_from_actions(None, &acts(&[6, 2, 9, 0])).unwrap();
        let mut m = small(5);
        m.force_gates(-40.0, 40.0);
        let out = m.forward(&g).unwrap();
        for (c, c0) in out.strengths.iter().zip(g.matrix()) {
            assert!((c - c0).abs() < 1e-9);
        }
        m.force_gates(40.0, -40.0);
        let out = m.forward_iterations(&g, 1).unwrap();
        for (c, c0) in out.strengths.iter().zip(g.matrix()) {
            assert!((c - (1.0 - c0)).abs() < 1e-9);
        }
    }

    #[test]
    fn unknown_node_rejected() {
        let g = ConjugateTaskGraph::path_from_actions(Some(0), &acts(&[3, 12])).unwrap();
        assert!(matches!(small(0).forward(&g), Err(ModelError::Graph(GraphError::UnknownNode(_)))));
    }

    #[test]
    fn strengths_in_unit_interval() {
        for seed in 0..5 {
            let g = ConjugateTaskGraph::path_from_actions(None, &acts(&[0, 5, 2, 9, 5, 7])).unwrap();
            let out = small(seed).forward(&g).unwrap();
            assert!(out.strengths.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn completion_retains_path_edges() {
        let g = ConjugateTaskGraph::path_from_actions(None, &acts(&[1, 2, 3])).unwrap();
        let m = small(1);
        assert!(g.is_subgraph_of(&m.complete(&g, 0.5).unwrap()));
        assert_eq!(m.complete(&g, 1.0 + 1e-12).unwrap(), g);
    }

    #[test]
    fn permutation_equivariance() {
        let m = small(2);
        let rows = [10, 4, 1, 7];
        let n = rows.len();
        let adj = [0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0.];
        let base = m.forward_rows(&rows, &adj).unwrap();
        let perm = [2, 0, 3, 1];
        let prow: Vec<usize> = perm.iter().map(|&p| rows[p]).collect();
        let padj: Vec<f64> = (0..n * n).map(|k| adj[perm[k / n] * n + perm[k % n]]).collect();
        let out = m.forward_rows(&prow, &padj).unwrap();
        for k in 0..n * n {
            let want = base[perm[k / n] * n + perm[k % n]];
            assert!((out[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_check_over_seeds() {
        let path = ConjugateTaskGraph::path_from_actions(Some(1), &acts(&[2, 5, 8])).unwrap();
        let alt = ConjugateTaskGraph::path_from_actions(Some(1), &acts(&[5, 2, 8])).unwrap();
        let target = union_graphs(&[path.clone(), alt], None).unwrap();
        let pair = GcnTrainingPair::new(path, &target).unwrap();
        for seed in 0..10 {
            let m = small(seed);
            let err = gradient_check(
                &m.params,
                &GradCheckOptions {
                    seed,
                    ..Default::default()
                },
                |p| {
                    let (l, g) = m.pair_loss(p, &pair)?;
                    Ok(scaled(l, g))
                },
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn identity_pairs_reach_full_f1() {
        let seqs = [[1u32, 2, 3], [4, 5, 6], [7, 8, 9], [3, 6, 9]];
        let pairs: Vec<_> = seqs
            .iter()
            .map(|s| {
                let g = ConjugateTaskGraph::path_from_actions(None, &acts(s)).unwrap();
                GcnTrainingPair::new(g.clone(), &g).unwrap()
            })
            .collect();
        let mut m = small(3);
        m.config.train = TrainConfig {
            epochs: 60,
            batch_size: 4,
            learning_rate: 1e-2,
            clip_norm: Some(5.0),
        };
        let log = m.train(&pairs, 0).unwrap();
        assert_eq!(log.edges.len(), 60);
        assert_eq!(m.edge_metrics(&pairs, 0.5).unwrap().f1(), 1.0);
        assert!(log.epochs.last().unwrap().mean_loss < log.epochs[0].mean_loss);
    }

    #[test]
    fn non_subgraph_pair_rejected() {
        let a = ConjugateTaskGraph::path_from_actions(None, &acts(&[1, 2])).unwrap();
        let b = ConjugateTaskGraph::path_from_actions(None, &acts(&[2, 1])).unwrap();
        assert!(matches!(GcnTrainingPair::new(a, &b), Err(ModelError::Data(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small(4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gcn.json");
        m.save(&p).unwrap();
        assert_eq!(GcnParams::load(&p).unwrap(), m);
    }
}
