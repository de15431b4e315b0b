use serde::{Deserialize, Serialize};

use super::ExecutorParams;
use crate::ctg::{goal_distance, ConjugateTaskGraph, NodeKey, OracleOptions};
use crate::env::{ActionId, Demonstration, EnvState, Observation, StepStatus, TaskSpec, World};
use crate::gcn::GcnOutput;
use crate::train::{argmax, ModelError};

/// Probability floor applied before taking logs in NLL scoring.
pub const NLL_FLOOR: f64 = 1e-7;
/// Consecutive INVALID steps that abort a rollout.
pub const INVALID_LIMIT: usize = 3;

/// What a controller may look at when deciding. `state` and `last_action`
/// are only used by the ground-truth controllers.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub obs: &'a Observation,
    pub state: Option<&'a EnvState>,
    pub last_action: Option<ActionId>,
}

/// ℓ(n|o): a distribution over `graph.nodes()`, in node order.
pub trait NodeLocalizer {
    fn localize(&self, ctx: &StepContext<'_>, graph: &ConjugateTaskGraph) -> Result<Vec<f64>, ModelError>;
}

/// ε(a|n,o): a distribution over `candidates`.
pub trait EdgeClassifier {
    fn classify(&self, ctx: &StepContext<'_>, node: NodeKey, candidates: &[ActionId]) -> Result<Vec<f64>, ModelError>;
}

pub struct LearnedLocalizer<'a>(pub &'a ExecutorParams);

impl NodeLocalizer for LearnedLocalizer<'_> {
    fn localize(&self, ctx: &StepContext<'_>, graph: &ConjugateTaskGraph) -> Result<Vec<f64>, ModelError> {
        self.0.localize(ctx.obs, graph)
    }
}

/// Learned edge classifier bound to the GCN embeddings of one task graph.
pub struct LearnedEdges<'a> {
    pub exec: &'a ExecutorParams,
    pub gcn: GcnOutput,
}

impl EdgeClassifier for LearnedEdges<'_> {
    fn classify(&self, ctx: &StepContext<'_>, node: NodeKey, candidates: &[ActionId]) -> Result<Vec<f64>, ModelError> {
        let emb = self
            .gcn
            .embedding(node)
            .ok_or_else(|| ModelError::Data(format!("no GCN embedding for {node}")))?;
        let rows = candidates
            .iter()
            .map(|&a| {
                self.exec
                    .row_of(NodeKey::Action(a))
                    .ok_or_else(|| ModelError::Data(format!("action {a} outside vocabulary")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.exec.classify_edge(ctx.obs, emb, &rows)
    }
}

pub struct UniformLocalizer;

impl NodeLocalizer for UniformLocalizer {
    fn localize(&self, _: &StepContext<'_>, graph: &ConjugateTaskGraph) -> Result<Vec<f64>, ModelError> {
        let n = graph.num_nodes();
        Ok(vec![1.0 / n as f64; n])
    }
}

pub struct UniformEdges;

impl EdgeClassifier for UniformEdges {
    fn classify(&self, _: &StepContext<'_>, _: NodeKey, candidates: &[ActionId]) -> Result<Vec<f64>, ModelError> {
        let k = candidates.len();
        Ok(vec![1.0 / k as f64; k])
    }
}

/// Certain of the node of the last executed action (START before any).
pub struct TrueLocalizer;

impl NodeLocalizer for TrueLocalizer {
    fn localize(&self, ctx: &StepContext<'_>, graph: &ConjugateTaskGraph) -> Result<Vec<f64>, ModelError> {
        let node = ctx.last_action.map_or(NodeKey::Start, NodeKey::Action);
        let mut p = vec![0.0; graph.num_nodes()];
        match graph.index_of(node) {
            Some(i) => p[i] = 1.0,
            None => return UniformLocalizer.localize(ctx, graph),
        }
        Ok(p)
    }
}

/// Puts its mass on candidates that bring the true state one step closer
/// to the goal.
pub struct TrueEdges<'a> {
    pub world: &'a World,
    pub task: &'a TaskSpec,
    pub opts: OracleOptions,
}

impl EdgeClassifier for TrueEdges<'_> {
    fn classify(&self, ctx: &StepContext<'_>, _: NodeKey, candidates: &[ActionId]) -> Result<Vec<f64>, ModelError> {
        let state = ctx
            .state
            .ok_or_else(|| ModelError::Data("ground-truth edge classifier needs the environment state".into()))?;
        let here = goal_distance(self.world, self.task, state, &self.opts)?;
        let good: Vec<bool> = candidates
            .iter()
            .map(|&a| {
                self.world
                    .transition(state, a)
                    .and_then(|s| goal_distance(self.world, self.task, &s, &self.opts).ok())
                    .is_some_and(|d| d + 1 == here)
            })
            .collect();
        let k = good.iter().filter(|g| **g).count();
        if k == 0 {
            return UniformEdges.classify(ctx, NodeKey::Start, candidates);
        }
        Ok(good.iter().map(|&g| if g { 1.0 / k as f64 } else { 0.0 }).collect())
    }
}

/// A task graph plus the controllers that execute it.
pub struct PolicyBundle<'a> {
    pub graph: ConjugateTaskGraph,
    pub localizer: Box<dyn NodeLocalizer + 'a>,
    pub edges: Box<dyn EdgeClassifier + 'a>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDecision {
    pub node: NodeKey,
    pub node_probs: Vec<f64>,
    /// `None` at a dead end.
    pub action: Option<ActionId>,
    pub candidates: Vec<ActionId>,
    pub edge_probs: Vec<f64>,
}

/// Index of the most probable node; ties go to the lowest action id and
/// START ranks after every action.
fn pick_node(graph: &ConjugateTaskGraph, probs: &[f64]) -> Option<usize> {
    let n = graph.num_nodes();
    let order = (0..n)
        .filter(|&i| graph.nodes()[i] != NodeKey::Start)
        .chain(graph.index_of(NodeKey::Start));
    let mut best: Option<usize> = None;
    for i in order {
        if best.is_none_or(|b| probs[i] > probs[b]) {
            best = Some(i);
        }
    }
    best
}

impl PolicyBundle<'_> {
    pub fn step(&self, ctx: &StepContext<'_>) -> Result<StepDecision, ModelError> {
        let node_probs = self.localizer.localize(ctx, &self.graph)?;
        let i = pick_node(&self.graph, &node_probs).ok_or_else(|| ModelError::Data("empty graph".into()))?;
        let node = self.graph.nodes()[i];
        let candidates = self.graph.outgoing(node)?;
        if candidates.is_empty() {
            return Ok(StepDecision {
                node,
                node_probs,
                action: None,
                candidates,
                edge_probs: Vec::new(),
            });
        }
        let edge_probs = self.edges.classify(ctx, node, &candidates)?;
        let action = argmax(&edge_probs).map(|k| candidates[k]);
        Ok(StepDecision {
            node,
            node_probs,
            action,
            candidates,
            edge_probs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub observation: String,
    /// Localized node; `None` for policies without a graph.
    pub node: Option<NodeKey>,
    pub action: Option<ActionId>,
    pub status: Option<StepStatus>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutOutcome {
    Goal,
    InvalidLoop,
    DeadEnd,
    Budget,
    /// The policy declared the episode finished.
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub steps: Vec<TrajectoryStep>,
    pub success: bool,
    pub outcome: RolloutOutcome,
    pub final_state: EnvState,
}

impl Rollout {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rollouts serialize")
    }
}

/// Executes the bundle from `initial` until the goal, a dead end,
/// [`INVALID_LIMIT`] consecutive invalid actions, or `max_steps`.
pub fn rollout(
    bundle: &PolicyBundle<'_>,
    world: &World,
    task: &TaskSpec,
    initial: &EnvState,
    max_steps: usize,
) -> Result<Rollout, ModelError> {
    if max_steps == 0 {
        return Err(ModelError::Data("max_steps must be at least 1".into()));
    }
    let mut state = initial.clone();
    let mut obs = world.featurize(&state);
    let mut steps = Vec::new();
    let mut last_action = None;
    let mut invalid = 0;
    let finish = |steps, state: EnvState, outcome| {
        let success = world.check_success(&state, task);
        Ok(Rollout {
            steps,
            success,
            outcome,
            final_state: state,
        })
    };
    if world.check_success(&state, task) {
        return finish(steps, state, RolloutOutcome::Goal);
    }
    for _ in 0..max_steps {
        let ctx = StepContext {
            obs: &obs,
            state: Some(&state),
            last_action,
        };
        let d = bundle.step(&ctx)?;
        let Some(a) = d.action else {
            steps.push(TrajectoryStep {
                observation: obs.digest(),
                node: Some(d.node),
                action: None,
                status: None,
            });
            return finish(steps, state, RolloutOutcome::DeadEnd);
        };
        let (next, next_obs, status) = world.step(&state, a, task)?;
        steps.push(TrajectoryStep {
            observation: obs.digest(),
            node: Some(d.node),
            action: Some(a),
            status: Some(status),
        });
        match status {
            StepStatus::Goal => return finish(steps, next, RolloutOutcome::Goal),
            StepStatus::Invalid => {
                invalid += 1;
                if invalid >= INVALID_LIMIT {
                    return finish(steps, next, RolloutOutcome::InvalidLoop);
                }
            }
            StepStatus::Ok => {
                invalid = 0;
                last_action = Some(a);
            }
        }
        state = next;
        obs = next_obs;
    }
    finish(steps, state, RolloutOutcome::Budget)
}

/// `−Σ_t log π(a_t|o_t)` with the node teacher-forced to the previous
/// demonstrated action; actions off the graph score [`NLL_FLOOR`].
pub fn nll_of_demo(graph: &ConjugateTaskGraph, edges: &dyn EdgeClassifier, demo: &Demonstration) -> Result<f64, ModelError> {
    let actions = demo.actions.as_ref().ok_or(ModelError::Unlabeled(demo.task_id))?;
    let mut nll = 0.0;
    for (t, &a) in actions.iter().enumerate() {
        let node = if t == 0 { NodeKey::Start } else { NodeKey::Action(actions[t - 1]) };
        let mut p = NLL_FLOOR;
        if graph.contains(node) {
            let cands = graph.outgoing(node)?;
            if let Some(k) = cands.iter().position(|&c| c == a) {
                let last_action = (t > 0).then(|| actions[t - 1]);
                let ctx = StepContext {
                    obs: &demo.observations[t],
                    state: None,
                    last_action,
                };
                p = edges.classify(&ctx, node, &cands)?[k].max(NLL_FLOOR);
            }
        }
        nll -= p.ln();
    }
    Ok(nll)
}

/// Closed form of the uniform policy's NLL: `Σ_t ln outdegree(n_t)`, or
/// `None` when some demonstrated transition is off the graph.
pub fn uniform_nll(graph: &ConjugateTaskGraph, demo: &Demonstration) -> Option<f64> {
    let actions = demo.actions.as_ref()?;
    let mut total = 0.0;
    for (t, &a) in actions.iter().enumerate() {
        let node = if t == 0 { NodeKey::Start } else { NodeKey::Action(actions[t - 1]) };
        let out = graph.outgoing(node).ok()?;
        if !out.contains(&a) {
            return None;
        }
        total += (out.len() as f64).ln();
    }
    Some(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctg::{oracle_graph, ConjugateTaskGraph};
    use crate::env::{BlockWorldState, DomainKind, Goal, StackingGoal, StackingWorld};

    fn task(b: usize, stacks: &[Vec<usize>]) -> (World, TaskSpec) {
        let t = TaskSpec {
            id: 0,
            domain: DomainKind::Stacking,
            seed: 0,
            goal: Goal::Stacking(StackingGoal {
                support: BlockWorldState::from_stacks(b, stacks).support,
            }),
        };
        (World::Stacking(StackingWorld::new(b)), t)
    }

    fn oracle_bundle<'a>(w: &'a World, t: &'a TaskSpec, s: &EnvState) -> PolicyBundle<'a> {
        PolicyBundle {
            graph: oracle_graph(w, t, s, &OracleOptions::default()).unwrap(),
            localizer: Box::new(TrueLocalizer),
            edges: Box::new(TrueEdges {
                world: w,
                task: t,
                opts: OracleOptions::default(),
            }),
        }
    }

    #[test]
    fn oracle_controllers_solve_task() {
        let (w, t) = task(3, &[vec![2, 1, 0]]);
        let (s, _) = w.reset(&t, 0).unwrap();
        let b = oracle_bundle(&w, &t, &s);
        let r = rollout(&b, &w, &t, &s, 10).unwrap();
        assert!(r.success);
        assert_eq!(r.outcome, RolloutOutcome::Goal);
        assert_eq!(r.steps.len(), 2);
        assert!(r.to_json().contains("\"status\": \"goal\""));
    }

    #[test]
    fn satisfied_start_is_immediate_success() {
        let (w, t) = task(3, &[vec![0], vec![1], vec![2]]);
        let s = EnvState::Stacking(BlockWorldState::from_stacks(3, &[vec![0], vec![1], vec![2]]));
        let b = PolicyBundle {
            graph: ConjugateTaskGraph::empty(None, []),
            localizer: Box::new(UniformLocalizer),
            edges: Box::new(UniformEdges),
        };
        let r = rollout(&b, &w, &t, &s, 5).unwrap();
        assert!(r.success && r.steps.is_empty());
    }

    #[test]
    fn step_budget_is_enforced() {
        let (w, t) = task(4, &[vec![3, 2, 1, 0]]);
        let (s, _) = w.reset(&t, 0).unwrap();
        let b = oracle_bundle(&w, &t, &s);
        let r = rollout(&b, &w, &t, &s, 1).unwrap();
        assert!(!r.success);
        assert_eq!(r.outcome, RolloutOutcome::Budget);
        assert!(rollout(&b, &w, &t, &s, 0).is_err());
    }

    #[test]
    fn dead_end_and_invalid_loop() {
        let (w, t) = task(3, &[vec![2, 1, 0]]);
        let (s, _) = w.reset(&t, 0).unwrap();
        let d = w.demo(&t, 0).unwrap();
        let acts = d.actions.clone().unwrap();
        // Path cut after the first action: dead end at that node.
        let b = PolicyBundle {
            graph: ConjugateTaskGraph::path_from_actions(None, &acts[..1]).unwrap(),
            localizer: Box::new(TrueLocalizer),
            edges: Box::new(UniformEdges),
        };
        let r = rollout(&b, &w, &t, &s, 10).unwrap();
        assert_eq!(r.outcome, RolloutOutcome::DeadEnd);
        // Uniform localizer stays on the lowest node; repeating its
        // successor eventually becomes invalid.
        let b = PolicyBundle {
            graph: ConjugateTaskGraph::path_from_actions(None, &[acts[1], acts[0]]).unwrap(),
            localizer: Box::new(UniformLocalizer),
            edges: Box::new(UniformEdges),
        };
        let r = rollout(&b, &w, &t, &s, 20).unwrap();
        assert!(!r.success);
    }

    #[test]
    fn start_ranks_last_on_ties() {
        let g = ConjugateTaskGraph::path_from_actions(None, &[ActionId(5), ActionId(2)]).unwrap();
        let i = pick_node(&g, &[1.0 / 3.0; 3]).unwrap();
        assert_eq!(g.nodes()[i], NodeKey::Action(ActionId(2)));
        let i = pick_node(&g, &[0.5, 0.25, 0.25]).unwrap();
        assert_eq!(g.nodes()[i], NodeKey::Start);
    }

    #[test]
    fn uniform_nll_matches_closed_form() {
        let (w, t) = task(4, &[vec![0, 1], vec![2, 3]]);
        let d = w.demo(&t, 0).unwrap();
        let g = ConjugateTaskGraph::fully_connected(None, w.actions(), true);
        let nll = nll_of_demo(&g, &UniformEdges, &d).unwrap();
        let closed = uniform_nll(&g, &d).unwrap();
        assert!((nll - closed).abs() < 1e-9);
        let k = d.actions.as_ref().unwrap().len() as f64;
        assert!((closed - k * (w.vocab_size() as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn off_graph_actions_hit_the_floor() {
        let (w, t) = task(3, &[vec![2, 1, 0]]);
        let d = w.demo(&t, 0).unwrap();
        let g = ConjugateTaskGraph::empty(None, []);
        let n = d.actions.as_ref().unwrap().len() as f64;
        assert!((nll_of_demo(&g, &UniformEdges, &d).unwrap() - n * -NLL_FLOOR.ln()).abs() < 1e-9);
    }
}
