//! Deterministic symbolic simulators for the three task domains.
//!
//! [`World`] is the per-domain configuration (sizes, action vocabulary) and
//! dispatches every operation to the domain module. States, goals and
//! observations are plain values; stepping never mutates its input.

pub mod collection;
pub mod sorting;
pub mod stacking;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use collection::{AgentLocation, CollectWorldState, CollectionGoal, CollectionWorld, Placement};
pub use sorting::{ObjectLocation, SortingGoal, SortingState, SortingWorld};
pub use stacking::{BlockWorldState, StackingGoal, StackingWorld, Support};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("action id {id} outside vocabulary of {vocab} actions")]
    InvalidAction { id: u32, vocab: usize },
    #[error("task generation failed: {0}")]
    Generation(String),
    #[error("goal unreachable for task {task}: {reason}")]
    Unreachable { task: u64, reason: String },
    #[error("{0} does not belong to this world's domain")]
    DomainMismatch(&'static str),
}

/// Index into a domain's action vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub u32);

impl ActionId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Stacking,
    Sorting,
    Collection,
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainKind::Stacking => "stacking",
            DomainKind::Sorting => "sorting",
            DomainKind::Collection => "collection",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "domain", rename_all = "snake_case")]
pub enum Goal {
    Stacking(StackingGoal),
    Sorting(SortingGoal),
    Collection(CollectionGoal),
}

impl Goal {
    pub fn kind(&self) -> DomainKind {
        match self {
            Goal::Stacking(_) => DomainKind::Stacking,
            Goal::Sorting(_) => DomainKind::Sorting,
            Goal::Collection(_) => DomainKind::Collection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: u64,
    pub domain: DomainKind,
    /// Seed the task list was generated with.
    pub seed: u64,
    pub goal: Goal,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "domain", rename_all = "snake_case")]
pub enum EnvState {
    Stacking(BlockWorldState),
    Sorting(SortingState),
    Collection(CollectWorldState),
}

/// Featurized view of a state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation {
    pub features: Vec<f64>,
}

impl Observation {
    pub fn width(&self) -> usize {
        self.features.len()
    }

    /// Adds seeded Gaussian noise with standard deviation `sigma`.
    pub fn with_noise(&self, sigma: f64, rng: &mut ChaCha8Rng) -> Observation {
        if sigma <= 0.0 {
            return self.clone();
        }
        let normal = Normal::new(0.0, sigma).expect("sigma is positive");
        Observation {
            features: self.features.iter().map(|x| x + normal.sample(rng)).collect(),
        }
    }

    /// Short stable digest of the feature bytes.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for x in &self.features {
            h.update(x.to_le_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Ok,
    Invalid,
    Goal,
}

/// A demonstration: one observation before each action plus the terminal one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub task_id: u64,
    pub seed: u64,
    pub initial_state: EnvState,
    pub actions: Option<Vec<ActionId>>,
    pub observations: Vec<Observation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpreted_actions: Option<Vec<ActionId>>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn labels(&self) -> Option<&[ActionId]> {
        self.actions.as_deref()
    }

    pub fn without_labels(&self) -> Demonstration {
        Demonstration {
            actions: None,
            ..self.clone()
        }
    }
}

/// Domain configuration and action vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "domain", rename_all = "snake_case")]
pub enum World {
    Stacking(StackingWorld),
    Sorting(SortingWorld),
    Collection(CollectionWorld),
}

impl World {
    pub fn kind(&self) -> DomainKind {
        match self {
            World::Stacking(_) => DomainKind::Stacking,
            World::Sorting(_) => DomainKind::Sorting,
            World::Collection(_) => DomainKind::Collection,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            World::Stacking(w) => w.vocab_size(),
            World::Sorting(w) => w.vocab_size(),
            World::Collection(w) => w.vocab_size(),
        }
    }

    pub fn feature_width(&self) -> usize {
        match self {
            World::Stacking(w) => w.feature_width(),
            World::Sorting(w) => w.feature_width(),
            World::Collection(w) => w.feature_width(),
        }
    }

    pub fn actions(&self) -> impl Iterator<Item = ActionId> {
        (0..self.vocab_size() as u32).map(ActionId)
    }

    pub fn check_action(&self, a: ActionId) -> Result<(), EnvError> {
        if a.index() < self.vocab_size() {
            Ok(())
        } else {
            Err(EnvError::InvalidAction {
                id: a.0,
                vocab: self.vocab_size(),
            })
        }
    }

    /// Human-readable action name, e.g. `place(B, on A)`.
    pub fn action_name(&self, a: ActionId) -> String {
        if self.check_action(a).is_err() {
            return format!("invalid({})", a.0);
        }
        match self {
            World::Stacking(w) => w.action_name(a),
            World::Sorting(w) => w.action_name(a),
            World::Collection(w) => w.action_name(a),
        }
    }

    /// Generates `count` pairwise-distinct tasks, deterministic in `seed`.
    pub fn generate_tasks(&self, count: usize, seed: u64) -> Result<Vec<TaskSpec>, EnvError> {
        if count == 0 {
            return Err(EnvError::Generation("count must be at least 1".into()));
        }
        let goals = match self {
            World::Stacking(w) => w.generate_goals(count, seed)?.into_iter().map(Goal::Stacking).collect::<Vec<_>>(),
            World::Sorting(w) => w.generate_goals(count, seed)?.into_iter().map(Goal::Sorting).collect(),
            World::Collection(w) => w.generate_goals(count, seed)?.into_iter().map(Goal::Collection).collect(),
        };
        Ok(goals
            .into_iter()
            .enumerate()
            .map(|(i, goal)| TaskSpec {
                id: i as u64,
                domain: self.kind(),
                seed,
                goal,
            })
            .collect())
    }

    /// Default initial state for `task`.
    pub fn reset(&self, task: &TaskSpec, seed: u64) -> Result<(EnvState, Observation), EnvError> {
        let state = match (self, &task.goal) {
            (World::Stacking(w), Goal::Stacking(g)) => EnvState::Stacking(w.reset(g, seed)),
            (World::Sorting(w), Goal::Sorting(g)) => EnvState::Sorting(w.reset(g)),
            (World::Collection(w), Goal::Collection(g)) => EnvState::Collection(w.reset(g, seed)),
            _ => return Err(EnvError::DomainMismatch("task")),
        };
        let obs = self.featurize(&state);
        Ok((state, obs))
    }

    /// Sorting only: an initial state in which one of the demonstration's
    /// later target objects is already binned, so the demonstrated order
    /// cannot be followed.
    pub fn reset_alternate_order(
        &self,
        task: &TaskSpec,
        demo_actions: &[ActionId],
        seed: u64,
    ) -> Result<(EnvState, Observation), EnvError> {
        match (self, &task.goal) {
            (World::Sorting(w), Goal::Sorting(g)) => {
                let s = EnvState::Sorting(w.reset_alternate_order(g, demo_actions, seed, task.id)?);
                let obs = self.featurize(&s);
                Ok((s, obs))
            }
            _ => Err(EnvError::DomainMismatch("alternate-order reset")),
        }
    }

    pub fn step(&self, state: &EnvState, action: ActionId, task: &TaskSpec) -> Result<(EnvState, Observation, StepStatus), EnvError> {
        self.check_action(action)?;
        let next = match (self, state) {
            (World::Stacking(w), EnvState::Stacking(s)) => w.apply(s, action).map(EnvState::Stacking),
            (World::Sorting(w), EnvState::Sorting(s)) => w.apply(s, action).map(EnvState::Sorting),
            (World::Collection(w), EnvState::Collection(s)) => w.apply(s, action).map(EnvState::Collection),
            _ => return Err(EnvError::DomainMismatch("state")),
        };
        match next {
            None => Ok((state.clone(), self.featurize(state), StepStatus::Invalid)),
            Some(s) => {
                let status = if self.check_success(&s, task) {
                    StepStatus::Goal
                } else {
                    StepStatus::Ok
                };
                let obs = self.featurize(&s);
                Ok((s, obs, status))
            }
        }
    }

    /// Transition without featurization; `None` for an invalid action.
    pub fn transition(&self, state: &EnvState, action: ActionId) -> Option<EnvState> {
        match (self, state) {
            (World::Stacking(w), EnvState::Stacking(s)) => w.apply(s, action).map(EnvState::Stacking),
            (World::Sorting(w), EnvState::Sorting(s)) => w.apply(s, action).map(EnvState::Sorting),
            (World::Collection(w), EnvState::Collection(s)) => w.apply(s, action).map(EnvState::Collection),
            _ => None,
        }
    }

    pub fn check_success(&self, state: &EnvState, task: &TaskSpec) -> bool {
        match (state, &task.goal) {
            (EnvState::Stacking(s), Goal::Stacking(g)) => stacking::is_goal(s, g),
            (EnvState::Sorting(s), Goal::Sorting(g)) => sorting::is_goal(s, g, self.sorting_categories()),
            (EnvState::Collection(s), Goal::Collection(g)) => collection::is_goal(s, g),
            _ => false,
        }
    }

    fn sorting_categories(&self) -> usize {
        match self {
            World::Sorting(w) => w.categories,
            _ => 1,
        }
    }

    pub fn featurize(&self, state: &EnvState) -> Observation {
        let features = match (self, state) {
            (World::Stacking(w), EnvState::Stacking(s)) => w.featurize(s),
            (World::Sorting(w), EnvState::Sorting(s)) => w.featurize(s),
            (World::Collection(w), EnvState::Collection(s)) => w.featurize(s),
            _ => vec![0.0; self.feature_width()],
        };
        Observation { features }
    }

    /// Scripted demonstration from `initial`; `seed` picks the order among
    /// interchangeable sub-goals.
    pub fn plan_demo(&self, task: &TaskSpec, initial: &EnvState, seed: u64) -> Result<Demonstration, EnvError> {
        let actions = match (self, &task.goal, initial) {
            (World::Stacking(w), Goal::Stacking(g), EnvState::Stacking(s)) => w.plan(s, g, seed),
            (World::Sorting(w), Goal::Sorting(g), EnvState::Sorting(s)) => w.plan(s, g, seed),
            (World::Collection(w), Goal::Collection(g), EnvState::Collection(s)) => w.plan(s, g),
            _ => return Err(EnvError::DomainMismatch("demo")),
        }
        .ok_or_else(|| EnvError::Unreachable {
            task: task.id,
            reason: "planner found no plan".into(),
        })?;
        self.replay(task, initial, &actions, seed)
    }

    /// Replays `actions` from `initial`, recording observations; fails if the
    /// result does not reach the goal or an action is invalid.
    pub fn replay(&self, task: &TaskSpec, initial: &EnvState, actions: &[ActionId], seed: u64) -> Result<Demonstration, EnvError> {
        let mut state = initial.clone();
        let mut observations = vec![self.featurize(&state)];
        for &a in actions {
            let (next, obs, status) = self.step(&state, a, task)?;
            if status == StepStatus::Invalid {
                return Err(EnvError::Unreachable {
                    task: task.id,
                    reason: format!("invalid action {} during replay", self.action_name(a)),
                });
            }
            state = next;
            observations.push(obs);
        }
        if !self.check_success(&state, task) {
            return Err(EnvError::Unreachable {
                task: task.id,
                reason: "replay did not reach the goal".into(),
            });
        }
        Ok(Demonstration {
            task_id: task.id,
            seed,
            initial_state: initial.clone(),
            actions: Some(actions.to_vec()),
            observations,
            interpreted_actions: None,
        })
    }

    /// Convenience: reset with `seed` then plan a demo with the same seed.
    pub fn demo(&self, task: &TaskSpec, seed: u64) -> Result<Demonstration, EnvError> {
        let (s, _) = self.reset(task, seed)?;
        self.plan_demo(task, &s, seed)
    }
}

pub(crate) fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub(crate) fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observation_digest_is_stable() {
        let o = Observation {
            features: vec![0.0, 1.0, 0.5],
        };
        assert_eq!(o.digest(), o.clone().digest());
        assert_eq!(o.digest().len(), 16);
    }

    #[test]
    fn noise_is_seeded() {
        let o = Observation { features: vec![0.0; 8] };
        let a = o.with_noise(0.1, &mut rng(3, 0));
        let b = o.with_noise(0.1, &mut rng(3, 0));
        assert_eq!(a, b);
        assert_ne!(a, o);
        assert_eq!(o.with_noise(0.0, &mut rng(3, 0)), o);
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(8, 4), 70);
        assert_eq!(binomial(5, 0), 1);
        assert_eq!(binomial(3, 4), 0);
    }
}
