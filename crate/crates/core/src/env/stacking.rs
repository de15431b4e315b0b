//! Block stacking: `pick_and_place(block, destination)` over `B` labeled blocks.
//!
//! Action ids: `block * B + slot`, where slot `0..B-1` indexes the other
//! blocks in ascending order and slot `B-1` is the table.
//!
//! Placing is atomic, so the gripper ends each move resting on the block it
//! just placed. Its position is part of the observation: the same support
//! map can be reached by different final moves, and only the gripper tells
//! them apart.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{rng, ActionId, EnvError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    Table,
    On(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockWorldState {
    pub support: Vec<Support>,
    pub held: Option<usize>,
    /// Block the gripper rests on; `None` before the first move.
    #[serde(default)]
    pub gripper: Option<usize>,
}

impl BlockWorldState {
    pub fn all_on_table(blocks: usize) -> Self {
        Self {
            support: vec![Support::Table; blocks],
            held: None,
            gripper: None,
        }
    }

    pub fn is_clear(&self, block: usize) -> bool {
        !self.support.contains(&Support::On(block))
    }

    /// Checks single support, acyclicity and single occupant per block top.
    pub fn is_valid(&self) -> bool {
        let b = self.support.len();
        let mut occupied = vec![false; b];
        for s in &self.support {
            if let Support::On(t) = *s {
                if t >= b || occupied[t] {
                    return false;
                }
                occupied[t] = true;
            }
        }
        (0..b).all(|start| {
            let mut cur = start;
            for _ in 0..=b {
                match self.support[cur] {
                    Support::Table => return true,
                    Support::On(t) => cur = t,
                }
            }
            false
        }) && self.held.is_none_or(|h| h < b)
            && self.gripper.is_none_or(|g| g < b)
    }

    /// Stacks listed bottom to top, ordered by their bottom block.
    pub fn stacks(&self) -> Vec<Vec<usize>> {
        let b = self.support.len();
        let mut above = vec![None; b];
        for (blk, s) in self.support.iter().enumerate() {
            if let Support::On(t) = *s {
                above[t] = Some(blk);
            }
        }
        (0..b)
            .filter(|&blk| self.support[blk] == Support::Table)
            .map(|bottom| {
                let mut s = vec![bottom];
                while let Some(n) = above[*s.last().unwrap()] {
                    s.push(n);
                }
                s
            })
            .collect()
    }

    pub fn from_stacks(blocks: usize, stacks: &[Vec<usize>]) -> Self {
        let mut support = vec![Support::Table; blocks];
        for s in stacks {
            for w in s.windows(2) {
                support[w[1]] = Support::On(w[0]);
            }
        }
        Self {
            support,
            held: None,
            gripper: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StackingGoal {
    pub support: Vec<Support>,
}

pub fn is_goal(s: &BlockWorldState, g: &StackingGoal) -> bool {
    s.held.is_none() && s.support == g.support
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackingWorld {
    pub blocks: usize,
    /// Start episodes from a seeded random configuration instead of all-on-table.
    #[serde(default)]
    pub arbitrary_start: bool,
}

impl StackingWorld {
    pub fn new(blocks: usize) -> Self {
        Self {
            blocks,
            arbitrary_start: false,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.blocks * self.blocks
    }

    pub fn feature_width(&self) -> usize {
        let b = self.blocks;
        b * (b + 1) + b + 1
    }

    pub fn decode(&self, a: ActionId) -> (usize, Support) {
        let b = self.blocks;
        let block = a.index() / b;
        let slot = a.index() % b;
        let dest = if slot == b - 1 {
            Support::Table
        } else if slot < block {
            Support::On(slot)
        } else {
            Support::On(slot + 1)
        };
        (block, dest)
    }

    /// Inverse of [`decode`](Self::decode); `None` for a self-target.
    pub fn encode(&self, block: usize, dest: Support) -> Option<ActionId> {
        let b = self.blocks;
        let slot = match dest {
            Support::Table => b - 1,
            Support::On(t) if t == block => return None,
            Support::On(t) if t < block => t,
            Support::On(t) => t - 1,
        };
        Some(ActionId((block * b + slot) as u32))
    }

    pub fn action_name(&self, a: ActionId) -> String {
        let (block, dest) = self.decode(a);
        match dest {
            Support::Table => format!("place({}, on table)", block_name(block)),
            Support::On(t) => format!("place({}, on {})", block_name(block), block_name(t)),
        }
    }

    pub(crate) fn apply(&self, s: &BlockWorldState, a: ActionId) -> Option<BlockWorldState> {
        let (block, dest) = self.decode(a);
        if s.held.is_some() || !s.is_clear(block) || s.support[block] == dest {
            return None;
        }
        if let Support::On(t) = dest {
            if !s.is_clear(t) {
                return None;
            }
        }
        let mut next = s.clone();
        next.support[block] = dest;
        next.gripper = Some(block);
        Some(next)
    }

    pub(crate) fn featurize(&self, s: &BlockWorldState) -> Vec<f64> {
        let b = self.blocks;
        let mut f = vec![0.0; self.feature_width()];
        for (blk, sup) in s.support.iter().enumerate() {
            let col = match sup {
                Support::On(t) => *t,
                Support::Table => b,
            };
            f[blk * (b + 1) + col] = 1.0;
        }
        // Gripper position one-hot, then the grasp flag.
        if let Some(g) = s.held.or(s.gripper) {
            f[b * (b + 1) + g] = 1.0;
        }
        if s.held.is_some() {
            f[b * (b + 1) + b] = 1.0;
        }
        f
    }

    pub(crate) fn generate_goals(&self, count: usize, seed: u64) -> Result<Vec<StackingGoal>, EnvError> {
        let total = lah_total(self.blocks);
        if count as u128 > total {
            return Err(EnvError::Generation(format!(
                "{count} tasks requested but only {total} configurations of {} blocks exist",
                self.blocks
            )));
        }
        let mut r = rng(seed, 1);
        if self.blocks <= 8 {
            let mut all = enumerate_configurations(self.blocks);
            all.shuffle(&mut r);
            all.truncate(count);
            return Ok(all.into_iter().map(|s| StackingGoal { support: s.support }).collect());
        }
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let s = random_configuration(self.blocks, &mut r);
            if seen.insert(s.support.clone()) {
                out.push(StackingGoal { support: s.support });
            }
        }
        Ok(out)
    }

    pub(crate) fn reset(&self, goal: &StackingGoal, seed: u64) -> BlockWorldState {
        let table = BlockWorldState::all_on_table(self.blocks);
        if !self.arbitrary_start && table.support != goal.support {
            return table;
        }
        // Arbitrary starts, and the all-on-table goal whose canonical start
        // would already be solved.
        let mut r = rng(seed, 2);
        loop {
            let s = random_configuration(self.blocks, &mut r);
            if s.support != goal.support {
                return s;
            }
        }
    }

    /// Unstacks every misplaced block to the table (top first), then builds
    /// the goal stacks bottom-up one stack at a time in seeded order.
    pub(crate) fn plan(&self, start: &BlockWorldState, goal: &StackingGoal, seed: u64) -> Option<Vec<ActionId>> {
        if start.held.is_some() {
            return None;
        }
        let mut s = start.clone();
        let mut actions = Vec::new();
        loop {
            let settled = settled(&s, goal);
            let next = (0..self.blocks).find(|&b| !settled[b] && s.support[b] != Support::Table && s.is_clear(b));
            match next {
                Some(b) => {
                    let a = self.encode(b, Support::Table)?;
                    s = self.apply(&s, a)?;
                    actions.push(a);
                }
                None => break,
            }
        }
        let mut stacks: Vec<Vec<usize>> = BlockWorldState {
            support: goal.support.clone(),
            held: None,
            gripper: None,
        }
        .stacks()
        .into_iter()
        .filter(|st| st.len() > 1)
        .collect();
        stacks.shuffle(&mut rng(seed, 3));
        for st in stacks {
            for w in st.windows(2) {
                if s.support[w[1]] == Support::On(w[0]) {
                    continue;
                }
                let a = self.encode(w[1], Support::On(w[0]))?;
                s = self.apply(&s, a)?;
                actions.push(a);
            }
        }
        is_goal(&s, goal).then_some(actions)
    }
}

/// A block is settled when it and everything beneath it already match the goal.
fn settled(s: &BlockWorldState, g: &StackingGoal) -> Vec<bool> {
    let b = s.support.len();
    let mut memo: Vec<Option<bool>> = vec![None; b];
    fn go(blk: usize, s: &BlockWorldState, g: &StackingGoal, memo: &mut Vec<Option<bool>>) -> bool {
        if let Some(v) = memo[blk] {
            return v;
        }
        let v = s.support[blk] == g.support[blk]
            && match s.support[blk] {
                Support::Table => true,
                Support::On(t) => go(t, s, g, memo),
            };
        memo[blk] = Some(v);
        v
    }
    (0..b).map(|blk| go(blk, s, g, &mut memo)).collect()
}

pub fn block_name(b: usize) -> String {
    if b < 26 {
        ((b'A' + b as u8) as char).to_string()
    } else {
        format!("B{b}")
    }
}

/// Number of ways to arrange `n` labeled blocks into unordered sets of
/// ordered stacks (sum of Lah numbers).
pub fn lah_total(n: usize) -> u128 {
    // a(n) = (2n-1) a(n-1) - (n-1)(n-2) a(n-2)
    let mut prev: i128 = 1; // a(0)
    if n == 0 {
        return 1;
    }
    let mut cur: i128 = 1; // a(1)
    for k in 2..=n as i128 {
        let next = (2 * k - 1) * cur - (k - 1) * (k - 2) * prev;
        prev = cur;
        cur = next;
    }
    cur as u128
}

/// All configurations, each exactly once: blocks are inserted in index order
/// either as a new stack or at any height of an existing stack.
pub fn enumerate_configurations(blocks: usize) -> Vec<BlockWorldState> {
    fn rec(i: usize, n: usize, stacks: &mut Vec<Vec<usize>>, out: &mut Vec<BlockWorldState>) {
        if i == n {
            out.push(BlockWorldState::from_stacks(n, stacks));
            return;
        }
        stacks.push(vec![i]);
        rec(i + 1, n, stacks, out);
        stacks.pop();
        for si in 0..stacks.len() {
            for pos in 0..=stacks[si].len() {
                stacks[si].insert(pos, i);
                rec(i + 1, n, stacks, out);
                stacks[si].remove(pos);
            }
        }
    }
    let mut out = Vec::new();
    rec(0, blocks, &mut Vec::new(), &mut out);
    out
}

fn random_configuration(blocks: usize, r: &mut rand_chacha::ChaCha8Rng) -> BlockWorldState {
    use rand::Rng;
    let mut stacks: Vec<Vec<usize>> = Vec::new();
    for i in 0..blocks {
        let slots: usize = 1 + stacks.iter().map(|s| s.len() + 1).sum::<usize>();
        let mut pick = r.random_range(0..slots);
        if pick == 0 {
            stacks.push(vec![i]);
            continue;
        }
        pick -= 1;
        for s in stacks.iter_mut() {
            if pick <= s.len() {
                s.insert(pick, i);
                break;
            }
            pick -= s.len() + 1;
        }
    }
    BlockWorldState::from_stacks(blocks, &stacks)
}

/// Distinct supports among the given states (used by featurization tests).
pub fn distinct_supports(states: &[BlockWorldState]) -> usize {
    states.iter().map(|s| s.support.clone()).collect::<BTreeSet<_>>().len()
}
