//! Object sorting: pick each target object and place it in its category's bin.
//!
//! Object `o` has category `o % categories`. Action ids `0..objects` are
//! `pick(o)`, followed by `place(bin)` for each bin. Placing into the wrong
//! bin is allowed and cannot be undone. After a place the hand rests over
//! that bin, which the observation records.

use std::collections::HashSet;

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{rng, ActionId, EnvError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectLocation {
    Absent,
    Table,
    Held,
    Bin(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SortingState {
    pub objects: Vec<ObjectLocation>,
    /// Bin the empty hand rests over after a place.
    #[serde(default)]
    pub hand: Option<usize>,
}

impl SortingState {
    pub fn held(&self) -> Option<usize> {
        self.objects.iter().position(|l| *l == ObjectLocation::Held)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SortingGoal {
    /// Target objects, ascending.
    pub targets: Vec<usize>,
    /// Bin for each category; `None` for categories with no target.
    pub bin_of_category: Vec<Option<usize>>,
}

impl SortingGoal {
    pub fn bin_for(&self, object: usize, categories: usize) -> Option<usize> {
        self.bin_of_category.get(object % categories).copied().flatten()
    }
}

pub fn is_goal(s: &SortingState, g: &SortingGoal, categories: usize) -> bool {
    s.held().is_none()
        && g.targets
            .iter()
            .all(|&o| g.bin_for(o, categories).is_some_and(|b| s.objects[o] == ObjectLocation::Bin(b)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SortingWorld {
    pub objects: usize,
    pub categories: usize,
    pub bins: usize,
    pub targets_per_task: usize,
}

impl Default for SortingWorld {
    fn default() -> Self {
        Self {
            objects: 8,
            categories: 4,
            bins: 4,
            targets_per_task: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SortAction {
    Pick(usize),
    Place(usize),
}

impl SortingWorld {
    pub fn vocab_size(&self) -> usize {
        self.objects + self.bins
    }

    pub fn feature_width(&self) -> usize {
        self.objects * (3 + self.bins) + 1 + self.bins
    }

    pub fn decode(&self, a: ActionId) -> SortAction {
        if a.index() < self.objects {
            SortAction::Pick(a.index())
        } else {
            SortAction::Place(a.index() - self.objects)
        }
    }

    pub fn pick(&self, object: usize) -> ActionId {
        ActionId(object as u32)
    }

    pub fn place(&self, bin: usize) -> ActionId {
        ActionId((self.objects + bin) as u32)
    }

    pub fn action_name(&self, a: ActionId) -> String {
        match self.decode(a) {
            SortAction::Pick(o) => format!("pick(obj{o}:cat{})", o % self.categories),
            SortAction::Place(b) => format!("place(bin{b})"),
        }
    }

    pub(crate) fn apply(&self, s: &SortingState, a: ActionId) -> Option<SortingState> {
        let mut next = s.clone();
        match self.decode(a) {
            SortAction::Pick(o) => {
                if s.held().is_some() || s.objects[o] != ObjectLocation::Table {
                    return None;
                }
                next.objects[o] = ObjectLocation::Held;
                next.hand = None;
            }
            SortAction::Place(b) => {
                let h = s.held()?;
                next.objects[h] = ObjectLocation::Bin(b);
                next.hand = Some(b);
            }
        }
        Some(next)
    }

    pub(crate) fn featurize(&self, s: &SortingState) -> Vec<f64> {
        let per = 3 + self.bins;
        let mut f = vec![0.0; self.feature_width()];
        for (o, loc) in s.objects.iter().enumerate() {
            let col = match loc {
                ObjectLocation::Absent => 0,
                ObjectLocation::Table => 1,
                ObjectLocation::Held => 2,
                ObjectLocation::Bin(b) => 3 + b,
            };
            f[o * per + col] = 1.0;
        }
        if s.held().is_some() {
            f[self.objects * per] = 1.0;
        }
        if let Some(b) = s.hand {
            f[self.objects * per + 1 + b] = 1.0;
        }
        f
    }

    /// Number of distinct goals: every target subset times every bin map
    /// over the categories it contains.
    pub fn goal_count(&self) -> u128 {
        let k = self.targets_per_task;
        if k > self.objects || k == 0 {
            return 0;
        }
        let mut total = 0u128;
        for_each_subset(self.objects, k, &mut |subset| {
            let cats: HashSet<usize> = subset.iter().map(|o| o % self.categories).collect();
            total += (self.bins as u128).pow(cats.len() as u32);
        });
        total
    }

    pub(crate) fn generate_goals(&self, count: usize, seed: u64) -> Result<Vec<SortingGoal>, EnvError> {
        let total = self.goal_count();
        if count as u128 > total {
            return Err(EnvError::Generation(format!(
                "{count} sorting tasks requested but only {total} exist"
            )));
        }
        let mut r = rng(seed, 11);
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let mut targets = sample(&mut r, self.objects, self.targets_per_task).into_vec();
            targets.sort_unstable();
            let mut bin_of_category = vec![None; self.categories];
            for &o in &targets {
                let c = o % self.categories;
                if bin_of_category[c].is_none() {
                    bin_of_category[c] = Some(r.random_range(0..self.bins));
                }
            }
            let g = SortingGoal { targets, bin_of_category };
            if seen.insert(g.clone()) {
                out.push(g);
            }
        }
        Ok(out)
    }

    pub(crate) fn reset(&self, g: &SortingGoal) -> SortingState {
        let mut objects = vec![ObjectLocation::Absent; self.objects];
        for &o in &g.targets {
            objects[o] = ObjectLocation::Table;
        }
        SortingState { objects, hand: None }
    }

    /// Pre-bins one demonstrated target so that the demo's own transitions
    /// (its path graph) can no longer finish the task. Later targets are
    /// preferred; the first one is the fallback.
    pub(crate) fn reset_alternate_order(
        &self,
        g: &SortingGoal,
        demo_actions: &[ActionId],
        seed: u64,
        task: u64,
    ) -> Result<SortingState, EnvError> {
        let order: Vec<usize> = demo_actions
            .iter()
            .filter_map(|&a| match self.decode(a) {
                SortAction::Pick(o) => Some(o),
                SortAction::Place(_) => None,
            })
            .collect();
        if order.len() < 2 {
            return Err(EnvError::Unreachable {
                task,
                reason: "alternate order needs at least two demonstrated objects".into(),
            });
        }
        let bin_of = |o: usize| {
            g.bin_for(o, self.categories).ok_or_else(|| EnvError::Unreachable {
                task,
                reason: format!("object {o} has no goal bin"),
            })
        };
        let mut states = Vec::with_capacity(order.len());
        for &o in &order {
            let mut s = self.reset(g);
            s.objects[o] = ObjectLocation::Bin(bin_of(o)?);
            states.push(s);
        }
        let forcing: Vec<usize> = (1..states.len())
            .filter(|&i| !self.path_solves(&states[i], g, demo_actions))
            .collect();
        // Shared bins can let the path skip any later object; binning the
        // first one always blocks the walk from START.
        let i = if forcing.is_empty() {
            0
        } else {
            forcing[rng(seed, 12).random_range(0..forcing.len())]
        };
        Ok(states.swap_remove(i))
    }

    /// Whether some walk along the demo's consecutive-action transitions
    /// reaches the goal from `start`.
    pub fn path_solves(&self, start: &SortingState, g: &SortingGoal, actions: &[ActionId]) -> bool {
        let mut seen = HashSet::new();
        let mut stack = vec![(None::<ActionId>, start.clone())];
        while let Some((last, s)) = stack.pop() {
            if is_goal(&s, g, self.categories) {
                return true;
            }
            if !seen.insert((last, s.clone())) {
                continue;
            }
            let next: Vec<ActionId> = match last {
                None => actions.first().copied().into_iter().collect(),
                Some(l) => actions.windows(2).filter(|w| w[0] == l).map(|w| w[1]).collect(),
            };
            for a in next {
                if let Some(t) = self.apply(&s, a) {
                    stack.push((Some(a), t));
                }
            }
        }
        false
    }

    pub(crate) fn plan(&self, start: &SortingState, g: &SortingGoal, seed: u64) -> Option<Vec<ActionId>> {
        let mut actions = Vec::new();
        if let Some(h) = start.held() {
            actions.push(self.place(g.bin_for(h, self.categories)?));
        }
        let mut todo: Vec<usize> = g
            .targets
            .iter()
            .copied()
            .filter(|&o| start.objects[o] == ObjectLocation::Table)
            .collect();
        todo.shuffle(&mut rng(seed, 13));
        for o in todo {
            actions.push(self.pick(o));
            actions.push(self.place(g.bin_for(o, self.categories)?));
        }
        Some(actions)
    }
}

fn for_each_subset(n: usize, k: usize, f: &mut dyn FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::new(), f);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{DomainKind, EnvState, Goal, StepStatus, TaskSpec, World};

    fn two_category_task() -> (World, TaskSpec) {
        let w = SortingWorld {
            objects: 4,
            categories: 2,
            bins: 2,
            targets_per_task: 2,
        };
        let t = TaskSpec {
            id: 0,
            domain: DomainKind::Sorting,
            seed: 0,
            goal: Goal::Sorting(SortingGoal {
                targets: vec![0, 1],
                bin_of_category: vec![Some(1), Some(0)],
            }),
        };
        (World::Sorting(w), t)
    }

    #[test]
    fn seeds_cover_both_category_orders() {
        let (w, t) = two_category_task();
        let orders: HashSet<Vec<ActionId>> = (0..20).map(|s| w.demo(&t, s).unwrap().actions.unwrap()).collect();
        assert_eq!(orders.len(), 2);
        for o in &orders {
            assert_eq!(o.len(), 4);
        }
    }

    #[test]
    fn wrong_bin_is_permanent() {
        let (w, t) = two_category_task();
        let (s, _) = w.reset(&t, 0).unwrap();
        let (s, _, st) = w.step(&s, ActionId(0), &t).unwrap();
        assert_eq!(st, StepStatus::Ok);
        let (s, _, st) = w.step(&s, ActionId(4), &t).unwrap(); // bin0, goal is bin1
        assert_eq!(st, StepStatus::Ok);
        let (_, _, st) = w.step(&s, ActionId(0), &t).unwrap();
        assert_eq!(st, StepStatus::Invalid);
        let EnvState::Sorting(ss) = s else { panic!() };
        assert_eq!(ss.objects[0], ObjectLocation::Bin(0));
    }

    #[test]
    fn place_without_holding_is_invalid() {
        let (w, t) = two_category_task();
        let (s, _) = w.reset(&t, 0).unwrap();
        let (n, _, st) = w.step(&s, ActionId(5), &t).unwrap();
        assert_eq!(st, StepStatus::Invalid);
        assert_eq!(n, s);
    }

    #[test]
    fn goal_count_matches_enumeration() {
        let w = SortingWorld {
            objects: 4,
            categories: 2,
            bins: 2,
            targets_per_task: 2,
        };
        // {0,2},{1,3} share a category: 2 maps each; the other 4 pairs: 4 maps.
        assert_eq!(w.goal_count(), 2 * 2 + 4 * 4);
        let world = World::Sorting(w);
        assert_eq!(world.generate_tasks(20, 0).unwrap().len(), 20);
        assert!(world.generate_tasks(21, 0).is_err());
    }

    #[test]
    fn alternate_order_prebins_one_object() {
        let w = World::Sorting(SortingWorld::default());
        for t in w.generate_tasks(30, 4).unwrap() {
            let d = w.demo(&t, 1).unwrap();
            let acts = d.actions.unwrap();
            let (s, _) = w.reset_alternate_order(&t, &acts, 7).unwrap();
            let EnvState::Sorting(ss) = &s else { panic!() };
            assert_eq!(ss.objects.iter().filter(|l| matches!(l, ObjectLocation::Bin(_))).count(), 1);
            assert!(!w.check_success(&s, &t));
            w.plan_demo(&t, &s, 0).unwrap();
        }
    }

    #[test]
    fn alternate_order_defeats_the_demo_path() {
        let sw = SortingWorld::default();
        let w = World::Sorting(sw.clone());
        let mut later = 0;
        let tasks = w.generate_tasks(50, 5).unwrap();
        for t in &tasks {
            let Goal::Sorting(g) = &t.goal else { panic!() };
            let acts = w.demo(t, 2).unwrap().actions.unwrap();
            assert!(sw.path_solves(&sw.reset(g), g, &acts));
            let (s, _) = w.reset_alternate_order(t, &acts, 3).unwrap();
            let EnvState::Sorting(ss) = s else { panic!() };
            assert!(!sw.path_solves(&ss, g, &acts));
            later += usize::from(ss.objects[acts[0].index()] == ObjectLocation::Table);
        }
        assert!(later * 5 >= tasks.len() * 4, "{later}/{}", tasks.len());
    }

    #[test]
    fn generated_demos_replay() {
        let w = World::Sorting(SortingWorld::default());
        for t in w.generate_tasks(100, 8).unwrap() {
            let d = w.demo(&t, t.id).unwrap();
            assert_eq!(d.observations.len(), d.actions.as_ref().unwrap().len() + 1);
            let again = w.replay(&t, &d.initial_state, d.actions.as_ref().unwrap(), 0).unwrap();
            assert_eq!(again.observations, d.observations);
        }
    }
}
