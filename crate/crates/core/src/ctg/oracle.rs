use std::collections::{HashMap, HashSet};

use super::{ConjugateTaskGraph, GraphError, NodeKey};
use crate::env::{ActionId, EnvState, TaskSpec, World};

#[derive(Debug, Clone, Copy)]
pub struct OracleOptions {
    /// Maximum number of distinct states explored.
    pub max_states: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self { max_states: 100_000 }
    }
}

struct Search {
    /// Transitions `(from, action, to)` between consecutive layers.
    edges: Vec<(usize, ActionId, usize)>,
    on_path: Vec<bool>,
}

/// Layered breadth-first search that keeps only states lying on some
/// shortest successful sequence from `initial`.
fn search(world: &World, task: &TaskSpec, initial: &EnvState, opts: &OracleOptions) -> Result<Search, GraphError> {
    let mut index: HashMap<EnvState, usize> = HashMap::new();
    let mut states = vec![initial.clone()];
    let mut depth = vec![0usize];
    index.insert(initial.clone(), 0);
    let mut edges = Vec::new();
    let mut frontier = vec![0usize];
    let mut goals = Vec::new();
    if world.check_success(initial, task) {
        goals.push(0);
    }
    let mut d = 0;
    while goals.is_empty() {
        if frontier.is_empty() {
            return Err(GraphError::NoSolution);
        }
        let mut next = Vec::new();
        for &s in &frontier {
            for a in world.actions() {
                let Some(t) = world.transition(&states[s], a) else { continue };
                let ti = match index.get(&t) {
                    Some(&i) => i,
                    None => {
                        if states.len() >= opts.max_states {
                            return Err(GraphError::BudgetExceeded(opts.max_states));
                        }
                        let i = states.len();
                        index.insert(t.clone(), i);
                        states.push(t);
                        depth.push(d + 1);
                        next.push(i);
                        i
                    }
                };
                if depth[ti] == d + 1 {
                    edges.push((s, a, ti));
                }
            }
        }
        d += 1;
        goals = next.iter().copied().filter(|&i| world.check_success(&states[i], task)).collect();
        frontier = next;
    }
    // Walk back from the goal layer marking states that reach a goal.
    let mut on_path = vec![false; states.len()];
    for &g in &goals {
        on_path[g] = true;
    }
    for layer in (0..d).rev() {
        for &(s, _, t) in &edges {
            if depth[s] == layer && on_path[t] {
                on_path[s] = true;
            }
        }
    }
    Ok(Search { edges, on_path })
}

/// Maximal ground-truth graph: every consecutive transition of every shortest
/// successful action sequence from `initial`.
pub fn oracle_graph(world: &World, task: &TaskSpec, initial: &EnvState, opts: &OracleOptions) -> Result<ConjugateTaskGraph, GraphError> {
    let s = search(world, task, initial, opts)?;
    let useful: Vec<&(usize, ActionId, usize)> = s.edges.iter().filter(|(a, _, b)| s.on_path[*a] && s.on_path[*b]).collect();
    let mut g = ConjugateTaskGraph::empty(Some(task.id), useful.iter().map(|e| e.1));
    let mut entering: HashMap<usize, Vec<ActionId>> = HashMap::new();
    for &&(from, a, to) in &useful {
        entering.entry(to).or_default().push(a);
        if from == 0 {
            g.set_edge(NodeKey::Start, NodeKey::Action(a), 1.0)?;
        }
    }
    for &&(from, b, _) in &useful {
        if let Some(ins) = entering.get(&from) {
            for &a in ins {
                g.set_edge(NodeKey::Action(a), NodeKey::Action(b), 1.0)?;
            }
        }
    }
    Ok(g)
}

/// Length of the shortest successful sequence from `state`.
pub fn goal_distance(world: &World, task: &TaskSpec, state: &EnvState, opts: &OracleOptions) -> Result<usize, GraphError> {
    let mut seen: HashSet<EnvState> = HashSet::new();
    seen.insert(state.clone());
    let mut frontier = vec![state.clone()];
    let mut d = 0;
    loop {
        if frontier.iter().any(|s| world.check_success(s, task)) {
            return Ok(d);
        }
        if frontier.is_empty() {
            return Err(GraphError::NoSolution);
        }
        let mut next = Vec::new();
        for s in &frontier {
            for a in world.actions() {
                if let Some(t) = world.transition(s, a) {
                    if seen.len() >= opts.max_states {
                        return Err(GraphError::BudgetExceeded(opts.max_states));
                    }
                    if seen.insert(t.clone()) {
                        next.push(t);
                    }
                }
            }
        }
        frontier = next;
        d += 1;
    }
}

/// All shortest successful sequences, up to `limit` of them.
pub fn shortest_sequences(
    world: &World,
    task: &TaskSpec,
    initial: &EnvState,
    opts: &OracleOptions,
    limit: usize,
) -> Result<Vec<Vec<ActionId>>, GraphError> {
    let s = search(world, task, initial, opts)?;
    let mut out_edges: HashMap<usize, Vec<(ActionId, usize)>> = HashMap::new();
    for &(a, act, b) in &s.edges {
        if s.on_path[a] && s.on_path[b] {
            out_edges.entry(a).or_default().push((act, b));
        }
    }
    let mut out = Vec::new();
    let mut stack = vec![(0usize, Vec::new())];
    while let Some((node, seq)) = stack.pop() {
        match out_edges.get(&node) {
            None => {
                out.push(seq);
                if out.len() >= limit {
                    break;
                }
            }
            Some(next) => {
                for &(a, t) in next.iter().rev() {
                    let mut s2 = seq.clone();
                    s2.push(a);
                    stack.push((t, s2));
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctg::union_graphs;
    use crate::env::{BlockWorldState, DomainKind, Goal, SortingGoal, SortingWorld, StackingGoal, StackingWorld};

    fn stacking(b: usize, stacks: &[Vec<usize>]) -> (World, TaskSpec) {
        let t = TaskSpec {
            id: 1,
            domain: DomainKind::Stacking,
            seed: 0,
            goal: Goal::Stacking(StackingGoal {
                support: BlockWorldState::from_stacks(b, stacks).support,
            }),
        };
        (World::Stacking(StackingWorld::new(b)), t)
    }

    #[test]
    fn two_block_single_edge() {
        let (w, t) = stacking(2, &[vec![0, 1]]);
        let (s, _) = w.reset(&t, 0).unwrap();
        let g = oracle_graph(&w, &t, &s, &OracleOptions::default()).unwrap();
        assert_eq!(g.edges(), vec![(NodeKey::Start, NodeKey::Action(ActionId(2)))]);
        assert_eq!(w.action_name(ActionId(2)), "place(B, on A)");
    }

    #[test]
    fn single_stack_oracle_is_the_path() {
        let (w, t) = stacking(3, &[vec![2, 0, 1]]);
        let (s, _) = w.reset(&t, 0).unwrap();
        let g = oracle_graph(&w, &t, &s, &OracleOptions::default()).unwrap();
        let d = w.demo(&t, 0).unwrap();
        let p = ConjugateTaskGraph::path_from_actions(Some(1), d.actions.as_ref().unwrap()).unwrap();
        assert_eq!(g, p);
    }

    #[test]
    fn two_sorting_objects_give_both_interleavings() {
        let w = World::Sorting(SortingWorld {
            objects: 2,
            categories: 2,
            bins: 2,
            targets_per_task: 2,
        });
        let t = TaskSpec {
            id: 0,
            domain: DomainKind::Sorting,
            seed: 0,
            goal: Goal::Sorting(SortingGoal {
                targets: vec![0, 1],
                bin_of_category: vec![Some(0), Some(1)],
            }),
        };
        let (s, _) = w.reset(&t, 0).unwrap();
        let g = oracle_graph(&w, &t, &s, &OracleOptions::default()).unwrap();
        let non_start = g.edges().into_iter().filter(|(a, _)| *a != NodeKey::Start).count();
        assert_eq!(non_start, 4);
        let seqs = shortest_sequences(&w, &t, &s, &OracleOptions::default(), 100).unwrap();
        assert_eq!(seqs.len(), 2);
    }

    #[test]
    fn oracle_contains_every_shortest_path() {
        let w = World::Stacking(StackingWorld::new(4));
        for t in w.generate_tasks(40, 6).unwrap() {
            let (s, _) = w.reset(&t, 0).unwrap();
            let g = oracle_graph(&w, &t, &s, &OracleOptions::default()).unwrap();
            let seqs = shortest_sequences(&w, &t, &s, &OracleOptions::default(), 1000).unwrap();
            let paths: Vec<_> = seqs
                .iter()
                .map(|q| ConjugateTaskGraph::path_from_actions(Some(t.id), q).unwrap())
                .collect();
            for q in &seqs {
                w.replay(&t, &s, q, 0).unwrap();
            }
            for p in &paths {
                assert!(p.is_subgraph_of(&g));
            }
            let u = union_graphs(&paths, None).unwrap();
            assert_eq!(u.edge_set(), g.edge_set());
            let demo = w.plan_demo(&t, &s, 3).unwrap();
            let dp = ConjugateTaskGraph::path_from_actions(Some(t.id), demo.actions.as_ref().unwrap()).unwrap();
            assert!(dp.is_subgraph_of(&g));
        }
    }

    #[test]
    fn goal_distance_matches_shortest_sequences() {
        let w = World::Stacking(StackingWorld::new(4));
        for t in w.generate_tasks(10, 2).unwrap() {
            let (s, _) = w.reset(&t, 0).unwrap();
            let seqs = shortest_sequences(&w, &t, &s, &OracleOptions::default(), 1).unwrap();
            assert_eq!(goal_distance(&w, &t, &s, &OracleOptions::default()).unwrap(), seqs[0].len());
        }
    }

    #[test]
    fn budget_is_enforced() {
        let w = World::Stacking(StackingWorld::new(5));
        let t = w.generate_tasks(1, 0).unwrap().remove(0);
        let (s, _) = w.reset(&t, 0).unwrap();
        let r = oracle_graph(&w, &t, &s, &OracleOptions { max_states: 2 });
        assert_eq!(r, Err(GraphError::BudgetExceeded(2)));
    }
}
