//! Execution engine: node localizer, edge classifier and the factorized
//! policy `π(a|o) ∝ ε(a|n,o) ℓ(n|o)`.
//!
//! One parameter store holds both learned parts, because they share the
//! observation encoder and the node-embedding table:
//!
//! * localizer: `ℓ(n|o) ∝ exp(Enc(o) · NE_loc(n))`
//! * edge classifier: `ε(a|n,o) ∝ exp((W_ε [Enc(o), NE_gcn(n)]) · NE_loc(a))`
//!
//! `NE_gcn(n)` is the final node embedding from the graph completion network.

mod policy;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use policy::{
    nll_of_demo, rollout, uniform_nll, EdgeClassifier, LearnedEdges, LearnedLocalizer, NodeLocalizer, PolicyBundle, Rollout,
    RolloutOutcome, StepContext, StepDecision, TrajectoryStep, TrueEdges, TrueLocalizer, UniformEdges, UniformLocalizer, INVALID_LIMIT,
    NLL_FLOOR,
};

use crate::ctg::{ConjugateTaskGraph, NodeKey};
use crate::env::{Demonstration, Observation};
use crate::gcn::GcnOutput;
use crate::nn::{load_checkpoint, save_checkpoint, softmax, Activation, Mlp, ModuleParams, NnError, ParamId, StoreId, Tape, Var};
use crate::train::{argmax, fit, EpochLog, ModelError, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorConfig {
    pub encoder_hidden: usize,
    pub embed: usize,
    /// Localizer-only pretraining.
    pub localizer: TrainConfig,
    /// Edge classifier, trained together with the localizer loss.
    pub edge: TrainConfig,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: 64,
            embed: 32,
            localizer: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            edge: TrainConfig {
                epochs: 15,
                ..TrainConfig::default()
            },
        }
    }
}

/// One supervised edge decision: at frame `frame`, sitting on a node whose
/// GCN embedding is `node_embedding`, the demo took `candidates[label]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeStep {
    pub frame: usize,
    pub node_embedding: Vec<f64>,
    pub candidates: Vec<usize>,
    pub label: usize,
}

/// Localizer and edge-classifier supervision extracted from one demo.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutorExample {
    pub frames: Vec<Vec<f64>>,
    /// Node row per frame: START for the first frame, else the action that
    /// produced the frame.
    pub nodes: Vec<usize>,
    pub steps: Vec<EdgeStep>,
}

impl ExecutorExample {
    /// `union` supplies the candidate successors; `gcn` holds the embeddings
    /// computed on this demo's own path.
    pub fn from_demo(demo: &Demonstration, union: &ConjugateTaskGraph, gcn: &GcnOutput, vocab: usize) -> Result<Self, ModelError> {
        let actions = demo.actions.as_ref().ok_or(ModelError::Unlabeled(demo.task_id))?;
        if demo.observations.len() != actions.len() + 1 {
            return Err(ModelError::Data(format!(
                "demo of task {} has misaligned observations",
                demo.task_id
            )));
        }
        let frames: Vec<Vec<f64>> = demo.observations.iter().map(|o| o.features.clone()).collect();
        let mut nodes = vec![vocab];
        nodes.extend(actions.iter().map(|a| a.index()));
        let mut steps = Vec::new();
        for (t, &a) in actions.iter().enumerate() {
            let node = if t == 0 { NodeKey::Start } else { NodeKey::Action(actions[t - 1]) };
            let cands = union.outgoing(node)?;
            if cands.len() < 2 {
                continue;
            }
            let label = cands
                .iter()
                .position(|&c| c == a)
                .ok_or_else(|| ModelError::Data(format!("union graph of task {} lacks edge {node} -> {a}", demo.task_id)))?;
            let emb = gcn
                .embedding(node)
                .ok_or_else(|| ModelError::Data(format!("no GCN embedding for {node}")))?;
            steps.push(EdgeStep {
                frame: t,
                node_embedding: emb.to_vec(),
                candidates: cands.iter().map(|c| c.index()).collect(),
                label,
            });
        }
        Ok(Self { frames, nodes, steps })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ExecNet {
    vocab: usize,
    enc: Mlp,
    ne_loc: ParamId,
    w_eps: ParamId,
}

impl ExecNet {
    fn encode(&self, tape: &mut Tape<'_>, s: StoreId, frame: &[f64]) -> Result<Var, NnError> {
        let x = tape.input(frame.to_vec());
        self.enc.forward(tape, s, x)
    }

    fn edge_logits(&self, tape: &mut Tape<'_>, s: StoreId, e: Var, node_embedding: &[f64], candidates: &[usize]) -> Result<Var, NnError> {
        let g = tape.input(node_embedding.to_vec());
        let x = tape.concat(&[e, g]);
        let key = tape.matvec(s, self.w_eps, x)?;
        let scores = candidates
            .iter()
            .map(|&c| {
                let r = tape.row(s, self.ne_loc, c)?;
                tape.dot(key, r)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(tape.concat(&scores))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutorParams {
    pub config: ExecutorConfig,
    pub params: ModuleParams,
    net: ExecNet,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    component: String,
    config: ExecutorConfig,
}

impl ExecutorParams {
    pub fn new(vocab: usize, features: usize, gcn_width: usize, config: ExecutorConfig, seed: u64) -> Result<Self, ModelError> {
        let mut params = ModuleParams::new(seed);
        let d = config.embed;
        let enc = Mlp::new(
            &mut params,
            "enc",
            &[features, config.encoder_hidden, d],
            Activation::Tanh,
            Activation::Identity,
        )?;
        let ne_loc = params.add_weight("ne_loc", vocab + 1, d)?;
        let w_eps = params.add_weight("w_eps", d, d + gcn_width)?;
        Ok(Self {
            config,
            params,
            net: ExecNet { vocab, enc, ne_loc, w_eps },
        })
    }

    pub fn vocab(&self) -> usize {
        self.net.vocab
    }

    /// Embedding-table row of a node (START is the last row).
    pub fn row_of(&self, node: NodeKey) -> Option<usize> {
        match node {
            NodeKey::Start => Some(self.net.vocab),
            NodeKey::Action(a) if a.index() < self.net.vocab => Some(a.index()),
            NodeKey::Action(_) => None,
        }
    }

    /// Localizer cross entropy per frame, plus (if `with_edges`) edge
    /// cross entropy per supervised step; summed.
    pub fn loss(&self, params: &ModuleParams, ex: &ExecutorExample, with_edges: bool) -> Result<(f64, Vec<Vec<f64>>), NnError> {
        let net = &self.net;
        let mut tape = Tape::new();
        let s = tape.bind(params);
        let enc = ex
            .frames
            .iter()
            .map(|f| net.encode(&mut tape, s, f))
            .collect::<Result<Vec<_>, _>>()?;
        let mut terms = Vec::with_capacity(ex.frames.len() + ex.steps.len());
        for (&e, &node) in enc.iter().zip(&ex.nodes) {
            let logits = tape.matvec(s, net.ne_loc, e)?;
            terms.push(tape.softmax_ce(logits, node)?);
        }
        if with_edges {
            for st in &ex.steps {
                let logits = net.edge_logits(&mut tape, s, enc[st.frame], &st.node_embedding, &st.candidates)?;
                terms.push(tape.softmax_ce(logits, st.label)?);
            }
        }
        let total = tape.add_n(&terms)?;
        Ok((tape.scalar(total), tape.backward(total).into_store(s)))
    }

    /// Localizer pretraining, then joint localizer + edge training.
    pub fn train(&mut self, examples: &[ExecutorExample], seed: u64) -> Result<Vec<EpochLog>, ModelError> {
        let mut params = self.params.clone();
        let mut logs = fit("localizer", &mut params, &self.config.localizer, seed, examples, |p, ex| {
            self.loss(p, ex, false)
        })?;
        logs.extend(fit(
            "edge_classifier",
            &mut params,
            &self.config.edge,
            seed ^ 0x5eed,
            examples,
            |p, ex| self.loss(p, ex, true),
        )?);
        self.params = params;
        Ok(logs)
    }

    pub fn encode(&self, obs: &Observation) -> Result<Vec<f64>, ModelError> {
        Ok(self.net.enc.apply(&self.params, &obs.features)?)
    }

    fn node_logit(&self, e: &[f64], row: usize) -> f64 {
        let t = self.params.get(self.net.ne_loc);
        t.row(row).iter().zip(e).map(|(a, b)| a * b).sum()
    }

    /// ℓ(n|o) over the graph's nodes, in graph node order. Nodes outside
    /// the vocabulary get zero mass.
    pub fn localize(&self, obs: &Observation, graph: &ConjugateTaskGraph) -> Result<Vec<f64>, ModelError> {
        let e = self.encode(obs)?;
        let rows: Vec<Option<usize>> = graph.nodes().iter().map(|&n| self.row_of(n)).collect();
        let logits: Vec<f64> = rows.iter().flatten().map(|&r| self.node_logit(&e, r)).collect();
        let mut probs = softmax(&logits).into_iter();
        Ok(rows
            .iter()
            .map(|r| if r.is_some() { probs.next().unwrap_or(0.0) } else { 0.0 })
            .collect())
    }

    /// ε(a|n,o) over `candidates` (action rows).
    pub fn classify_edge(&self, obs: &Observation, node_embedding: &[f64], candidates: &[usize]) -> Result<Vec<f64>, ModelError> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let s = tape.bind(&self.params);
        let e = self.net.encode(&mut tape, s, &obs.features)?;
        let logits = self.net.edge_logits(&mut tape, s, e, node_embedding, candidates)?;
        Ok(softmax(tape.value(logits)))
    }

    /// Top-1 node accuracy over every frame (full vocabulary + START).
    pub fn localizer_accuracy(&self, examples: &[ExecutorExample]) -> Result<f64, ModelError> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for ex in examples {
            for (f, &node) in ex.frames.iter().zip(&ex.nodes) {
                let e = self.net.enc.apply(&self.params, f)?;
                let logits: Vec<f64> = (0..=self.net.vocab).map(|r| self.node_logit(&e, r)).collect();
                hits += usize::from(argmax(&logits) == Some(node));
                total += 1;
            }
        }
        Ok(if total == 0 { 1.0 } else { hits as f64 / total as f64 })
    }

    /// Top-1 accuracy over supervised (multi-candidate) edge decisions.
    pub fn edge_accuracy(&self, examples: &[ExecutorExample]) -> Result<f64, ModelError> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for ex in examples {
            for st in &ex.steps {
                let obs = Observation {
                    features: ex.frames[st.frame].clone(),
                };
                let p = self.classify_edge(&obs, &st.node_embedding, &st.candidates)?;
                hits += usize::from(argmax(&p) == Some(st.label));
                total += 1;
            }
        }
        Ok(if total == 0 { 1.0 } else { hits as f64 / total as f64 })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let meta = serde_json::to_value(Meta {
            component: "executor".into(),
            config: self.config.clone(),
        })
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        save_checkpoint(path, &self.params, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let ck = load_checkpoint(path)?;
        let meta: Meta = serde_json::from_value(ck.meta.clone()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if meta.component != "executor" {
            return Err(ModelError::Checkpoint(format!(
                "expected executor checkpoint, found {}",
                meta.component
            )));
        }
        let params = ck.to_params()?;
        let enc = Mlp::attach(&params, "enc", 2, Activation::Tanh, Activation::Identity)?;
        let ne_loc = params.id("ne_loc")?;
        let w_eps = params.id("w_eps")?;
        let vocab = params.get(ne_loc).rows() - 1;
        Ok(Self {
            config: meta.config,
            params,
            net: ExecNet { vocab, enc, ne_loc, w_eps },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctg::union_graphs;
    use crate::env::{ActionId, StackingWorld, World};
    use crate::gcn::{GcnConfig, GcnParams};
    use crate::nn::{gradient_check, scaled, GradCheckOptions};

    fn small_cfg(epochs: usize) -> ExecutorConfig {
        let t = TrainConfig {
            epochs,
            batch_size: 4,
            learning_rate: 1e-2,
            clip_norm: Some(5.0),
        };
        ExecutorConfig {
            encoder_hidden: 16,
            embed: 8,
            localizer: t.clone(),
            edge: t,
        }
    }

    /// Two demos per task of a 3-block world with the union as target.
    fn data(world: &World, gcn: &GcnParams, tasks: usize) -> Vec<ExecutorExample> {
        let mut out = Vec::new();
        for t in world.generate_tasks(tasks, 1).unwrap() {
            let demos: Vec<_> = (0..3).map(|s| world.demo(&t, s).unwrap()).collect();
            let paths: Vec<_> = demos
                .iter()
                .map(|d| ConjugateTaskGraph::path_from_actions(Some(t.id), d.actions.as_ref().unwrap()).unwrap())
                .collect();
            let union = union_graphs(&paths, None).unwrap();
            for (d, p) in demos.iter().zip(&paths) {
                let g = gcn.forward(p).unwrap();
                out.push(ExecutorExample::from_demo(d, &union, &g, world.vocab_size()).unwrap());
            }
        }
        out
    }

    fn setup() -> (World, GcnParams) {
        let w = World::Stacking(StackingWorld::new(3));
        let gcn = GcnParams::new(
            w.vocab_size(),
            GcnConfig {
                hidden: 6,
                ..GcnConfig::default()
            },
            0,
        )
        .unwrap();
        (w, gcn)
    }

    #[test]
    fn single_node_graph_localizes_with_certainty() {
        let (w, _) = setup();
        let ex = ExecutorParams::new(w.vocab_size(), w.feature_width(), 6, small_cfg(0), 0).unwrap();
        let g = ConjugateTaskGraph::empty(None, []);
        let t = w.generate_tasks(1, 0).unwrap().remove(0);
        let (_, obs) = w.reset(&t, 0).unwrap();
        assert_eq!(ex.localize(&obs, &g).unwrap(), vec![1.0]);
        assert_eq!(ex.classify_edge(&obs, &[0.0; 6], &[3]).unwrap(), vec![1.0]);
    }

    #[test]
    fn distributions_sum_to_one() {
        let (w, gcn) = setup();
        let ex = ExecutorParams::new(w.vocab_size(), w.feature_width(), 6, small_cfg(0), 1).unwrap();
        let t = w.generate_tasks(1, 0).unwrap().remove(0);
        let (_, obs) = w.reset(&t, 0).unwrap();
        let g = ConjugateTaskGraph::fully_connected(None, w.actions(), false);
        let l = ex.localize(&obs, &g).unwrap();
        assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let out = gcn
            .forward(&ConjugateTaskGraph::path_from_actions(None, &[ActionId(1), ActionId(2)]).unwrap())
            .unwrap();
        let e = ex.classify_edge(&obs, out.embedding(NodeKey::Start).unwrap(), &[0, 1, 2]).unwrap();
        assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(e.iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn forced_encoder_selects_matching_node() {
        let (w, _) = setup();
        let mut ex = ExecutorParams::new(w.vocab_size(), w.feature_width(), 6, small_cfg(0), 2).unwrap();
        let d = ex.config.embed;
        // Enc(o) = NE_loc(target row) through the output bias alone.
        let target = 4;
        let embed = {
            let t = ex.params.get_mut(ex.net.ne_loc);
            for r in 0..t.rows() {
                for c in 0..d {
                    t.values[r * d + c] = if c == r % d { 1.0 } else { 0.0 } + 0.1 * (r / d) as f64;
                }
            }
            t.row(target).to_vec()
        };
        let last = ex.net.enc.layers[1];
        ex.params.get_mut(last.w).values.iter_mut().for_each(|v| *v = 0.0);
        ex.params.get_mut(last.b.unwrap()).values.copy_from_slice(&embed);
        let t = w.generate_tasks(1, 0).unwrap().remove(0);
        let (_, obs) = w.reset(&t, 0).unwrap();
        let g = ConjugateTaskGraph::fully_connected(None, w.actions(), false);
        let l = ex.localize(&obs, &g).unwrap();
        let best = argmax(&l).unwrap();
        assert_eq!(g.nodes()[best], NodeKey::Action(ActionId(target as u32)));
    }

    #[test]
    fn gradient_check_over_seeds() {
        let (_, gcn) = setup();
        let w = World::Stacking(StackingWorld::new(4));
        let gcn = GcnParams::new(w.vocab_size(), gcn.config.clone(), 0).unwrap();
        let exs = data(&w, &gcn, 12);
        let ex = exs.iter().find(|e| !e.steps.is_empty()).expect("a multi-candidate step");
        for seed in 0..10 {
            let m = ExecutorParams::new(w.vocab_size(), w.feature_width(), 6, small_cfg(0), seed).unwrap();
            for with_edges in [false, true] {
                let err = gradient_check(
                    &m.params,
                    &GradCheckOptions {
                        seed,
                        ..Default::default()
                    },
                    |p| {
                        let (l, g) = m.loss(p, ex, with_edges)?;
                        Ok(scaled(l, g))
                    },
                )
                .unwrap();
                assert!(err < 1e-4, "seed {seed} edges {with_edges}: {err}");
            }
        }
    }

    #[test]
    fn training_fits_small_world() {
        let (w, gcn) = setup();
        let exs = data(&w, &gcn, 6);
        let mut m = ExecutorParams::new(w.vocab_size(), w.feature_width(), 6, small_cfg(80), 3).unwrap();
        let logs = m.train(&exs, 0).unwrap();
        assert_eq!(logs.len(), 160);
        assert!(m.localizer_accuracy(&exs).unwrap() > 0.95);
        assert!(m.edge_accuracy(&exs).unwrap() > 0.9);
        let mut again = ExecutorParams::new(w.vocab_size(), w.feature_width(), 6, small_cfg(80), 3).unwrap();
        again.train(&exs, 0).unwrap();
        assert_eq!(again.params, m.params);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (w, _) = setup();
        let m = ExecutorParams::new(w.vocab_size(), w.feature_width(), 6, small_cfg(0), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exec.json");
        m.save(&p).unwrap();
        assert_eq!(ExecutorParams::load(&p).unwrap(), m);
    }
}
