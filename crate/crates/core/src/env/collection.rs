//! Simplified object collection: `search`, `pickup(category)`, `dropoff(receptacle)`.
//!
//! Each category has at most one object instance. Search locations are
//! abstract ids visited in a seeded random order; only objects at the
//! agent's current search location are visible.

use std::collections::HashSet;

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{binomial, rng, ActionId, EnvError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentLocation {
    Start,
    Search(usize),
    Receptacle(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Absent,
    At(usize),
    Agent,
    Receptacle(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CollectWorldState {
    pub agent: AgentLocation,
    pub search_order: Vec<usize>,
    pub search_cursor: usize,
    /// Placement per category.
    pub placement: Vec<Placement>,
}

impl CollectWorldState {
    pub fn visible(&self) -> Vec<usize> {
        match self.agent {
            AgentLocation::Search(l) => self
                .placement
                .iter()
                .enumerate()
                .filter(|(_, p)| **p == Placement::At(l))
                .map(|(c, _)| c)
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn held(&self) -> Option<usize> {
        self.placement.iter().position(|p| *p == Placement::Agent)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CollectionGoal {
    /// `(category, receptacle)` pairs, ascending by category.
    pub manifest: Vec<(usize, usize)>,
}

pub fn is_goal(s: &CollectWorldState, g: &CollectionGoal) -> bool {
    s.held().is_none() && g.manifest.iter().all(|&(c, r)| s.placement[c] == Placement::Receptacle(r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionWorld {
    pub categories: usize,
    pub receptacles: usize,
    /// Search locations beyond the number of targets.
    pub extra_locations: usize,
    pub distractors: usize,
    /// Largest supported manifest; fixes the observation width.
    pub max_objects: usize,
    /// Manifest sizes cycled through by task generation.
    pub object_counts: Vec<usize>,
}

impl Default for CollectionWorld {
    fn default() -> Self {
        Self {
            categories: 8,
            receptacles: 5,
            extra_locations: 3,
            distractors: 2,
            max_objects: 5,
            object_counts: vec![2, 4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollectAction {
    Search,
    Pickup(usize),
    Dropoff(usize),
}

impl CollectionWorld {
    pub fn with_counts(counts: Vec<usize>) -> Self {
        Self {
            object_counts: counts,
            ..Self::default()
        }
    }

    pub fn vocab_size(&self) -> usize {
        1 + self.categories + self.receptacles
    }

    pub fn feature_width(&self) -> usize {
        let c = self.categories;
        2 + self.receptacles + c + c + 1 + c
    }

    pub fn decode(&self, a: ActionId) -> CollectAction {
        let i = a.index();
        if i == 0 {
            CollectAction::Search
        } else if i <= self.categories {
            CollectAction::Pickup(i - 1)
        } else {
            CollectAction::Dropoff(i - 1 - self.categories)
        }
    }

    pub fn search(&self) -> ActionId {
        ActionId(0)
    }

    pub fn pickup(&self, category: usize) -> ActionId {
        ActionId(1 + category as u32)
    }

    pub fn dropoff(&self, receptacle: usize) -> ActionId {
        ActionId((1 + self.categories + receptacle) as u32)
    }

    pub fn action_name(&self, a: ActionId) -> String {
        match self.decode(a) {
            CollectAction::Search => "search".into(),
            CollectAction::Pickup(c) => format!("pickup(cat{c})"),
            CollectAction::Dropoff(r) => format!("dropoff(rec{r})"),
        }
    }

    pub(crate) fn apply(&self, s: &CollectWorldState, a: ActionId) -> Option<CollectWorldState> {
        let mut next = s.clone();
        match self.decode(a) {
            CollectAction::Search => {
                let m = s.search_order.len();
                next.agent = AgentLocation::Search(s.search_order[s.search_cursor % m]);
                next.search_cursor = s.search_cursor + 1;
            }
            CollectAction::Pickup(c) => {
                if s.held().is_some() || !s.visible().contains(&c) {
                    return None;
                }
                next.placement[c] = Placement::Agent;
            }
            CollectAction::Dropoff(r) => {
                let c = s.held()?;
                next.placement[c] = Placement::Receptacle(r);
                next.agent = AgentLocation::Receptacle(r);
            }
        }
        Some(next)
    }

    pub(crate) fn featurize(&self, s: &CollectWorldState) -> Vec<f64> {
        let c = self.categories;
        // Search location ids are arbitrary; only "searching" is encoded.
        let locs = 1;
        let mut f = vec![0.0; self.feature_width()];
        let loc_col = match s.agent {
            AgentLocation::Start => 0,
            AgentLocation::Search(_) => 1,
            AgentLocation::Receptacle(r) => 1 + locs + r,
        };
        f[loc_col] = 1.0;
        let base = 1 + locs + self.receptacles;
        for v in s.visible() {
            f[base + v] = 1.0;
        }
        if let Some(h) = s.held() {
            f[base + c + h] = 1.0;
            f[base + 2 * c] = 1.0;
        }
        if let AgentLocation::Receptacle(r) = s.agent {
            for (cat, p) in s.placement.iter().enumerate() {
                if *p == Placement::Receptacle(r) {
                    f[base + 2 * c + 1 + cat] = 1.0;
                }
            }
        }
        f
    }

    fn count_for(&self, n: usize) -> u128 {
        binomial(self.categories, n) * (self.receptacles as u128).pow(n as u32)
    }

    /// Number of distinct manifests over the configured object counts.
    pub fn goal_count(&self) -> u128 {
        let distinct: HashSet<usize> = self.object_counts.iter().copied().collect();
        distinct.iter().map(|&n| self.count_for(n)).sum()
    }

    pub(crate) fn generate_goals(&self, count: usize, seed: u64) -> Result<Vec<CollectionGoal>, EnvError> {
        if self.object_counts.is_empty() {
            return Err(EnvError::Generation("no object counts configured".into()));
        }
        for &n in &self.object_counts {
            if n == 0 || n > self.max_objects || n > self.categories {
                return Err(EnvError::Generation(format!("unsupported object count {n}")));
            }
        }
        let total = self.goal_count();
        if count as u128 > total {
            return Err(EnvError::Generation(format!(
                "{count} collection tasks requested but only {total} exist"
            )));
        }
        let mut r = rng(seed, 21);
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(count);
        let mut i = 0usize;
        let mut attempts = 0usize;
        while out.len() < count {
            attempts += 1;
            if attempts > 1000 * count + 10_000 {
                return Err(EnvError::Generation("could not draw enough distinct manifests".into()));
            }
            let n = self.object_counts[i % self.object_counts.len()];
            let mut cats = sample(&mut r, self.categories, n).into_vec();
            cats.sort_unstable();
            let manifest = cats.into_iter().map(|c| (c, r.random_range(0..self.receptacles))).collect();
            let g = CollectionGoal { manifest };
            if seen.insert(g.clone()) {
                out.push(g);
                i += 1;
            }
        }
        Ok(out)
    }

    pub(crate) fn reset(&self, g: &CollectionGoal, seed: u64) -> CollectWorldState {
        let n = g.manifest.len();
        let m = n + self.extra_locations;
        let mut r = rng(seed, 22);
        let targets: HashSet<usize> = g.manifest.iter().map(|&(c, _)| c).collect();
        let mut others: Vec<usize> = (0..self.categories).filter(|c| !targets.contains(c)).collect();
        others.shuffle(&mut r);
        let d = self.distractors.min(others.len()).min(m - n);
        let present: Vec<usize> = g.manifest.iter().map(|&(c, _)| c).chain(others.into_iter().take(d)).collect();
        let spots = sample(&mut r, m, present.len()).into_vec();
        let mut placement = vec![Placement::Absent; self.categories];
        for (c, l) in present.into_iter().zip(spots) {
            placement[c] = Placement::At(l);
        }
        let mut search_order: Vec<usize> = (0..m).collect();
        search_order.shuffle(&mut r);
        CollectWorldState {
            agent: AgentLocation::Start,
            search_order,
            search_cursor: 0,
            placement,
        }
    }

    /// Searches until a pending target is visible, picks it up and delivers it.
    pub(crate) fn plan(&self, start: &CollectWorldState, g: &CollectionGoal) -> Option<Vec<ActionId>> {
        let mut s = start.clone();
        let mut actions = Vec::new();
        let budget = 4 * (g.manifest.len() + 1) * (start.search_order.len() + 2);
        while !is_goal(&s, g) {
            if actions.len() > budget {
                return None;
            }
            let a = if let Some(h) = s.held() {
                let r = g.manifest.iter().find(|&&(c, _)| c == h).map(|&(_, r)| r)?;
                self.dropoff(r)
            } else if let Some(&(c, _)) = g
                .manifest
                .iter()
                .find(|&&(c, r)| s.visible().contains(&c) && s.placement[c] != Placement::Receptacle(r))
            {
                self.pickup(c)
            } else {
                self.search()
            };
            s = self.apply(&s, a)?;
            actions.push(a);
        }
        Some(actions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{DomainKind, EnvState, Goal, StepStatus, TaskSpec, World};

    fn one_object_task() -> (World, TaskSpec) {
        let t = TaskSpec {
            id: 3,
            domain: DomainKind::Collection,
            seed: 0,
            goal: Goal::Collection(CollectionGoal { manifest: vec![(2, 4)] }),
        };
        (World::Collection(CollectionWorld::default()), t)
    }

    #[test]
    fn single_object_demo_shape() {
        let (w, t) = one_object_task();
        let cw = CollectionWorld::default();
        for seed in 0..10 {
            let d = w.demo(&t, seed).unwrap();
            let a = d.actions.unwrap();
            let n = a.len();
            assert!(n >= 3);
            assert!(a[..n - 2].iter().all(|&x| x == cw.search()));
            assert_eq!(a[n - 2], cw.pickup(2));
            assert_eq!(a[n - 1], cw.dropoff(4));
        }
    }

    #[test]
    fn pickup_requires_visibility() {
        let (w, t) = one_object_task();
        let cw = CollectionWorld::default();
        let (s, _) = w.reset(&t, 1).unwrap();
        let (n, _, st) = w.step(&s, cw.pickup(2), &t).unwrap();
        assert_eq!(st, StepStatus::Invalid);
        assert_eq!(n, s);
        let (_, _, st) = w.step(&s, cw.dropoff(0), &t).unwrap();
        assert_eq!(st, StepStatus::Invalid);
    }

    #[test]
    fn visible_set_tracks_location() {
        let (w, t) = one_object_task();
        let (mut s, _) = w.reset(&t, 5).unwrap();
        for _ in 0..8 {
            let (n, _, _) = w.step(&s, ActionId(0), &t).unwrap();
            s = n;
            let EnvState::Collection(cs) = &s else { panic!() };
            let AgentLocation::Search(l) = cs.agent else { panic!() };
            for (c, p) in cs.placement.iter().enumerate() {
                assert_eq!(cs.visible().contains(&c), *p == Placement::At(l));
            }
        }
    }

    #[test]
    fn full_manifest_is_success() {
        let (w, t) = one_object_task();
        let (s, _) = w.reset(&t, 0).unwrap();
        let EnvState::Collection(mut cs) = s else { panic!() };
        cs.placement[2] = Placement::Receptacle(4);
        assert!(w.check_success(&EnvState::Collection(cs.clone()), &t));
        cs.placement[2] = Placement::Receptacle(1);
        assert!(!w.check_success(&EnvState::Collection(cs), &t));
    }

    #[test]
    fn demos_for_all_sizes_replay() {
        let w = World::Collection(CollectionWorld::with_counts(vec![1, 2, 3, 4, 5]));
        for t in w.generate_tasks(50, 2).unwrap() {
            let d = w.demo(&t, t.id + 100).unwrap();
            let again = w.replay(&t, &d.initial_state, d.actions.as_ref().unwrap(), 0).unwrap();
            assert_eq!(again.observations, d.observations);
            for pair in d.observations.windows(2) {
                assert_ne!(pair[0], pair[1]);
            }
        }
    }
}
