//! Per-state action restriction from training-split visit counts.

use serde::{Deserialize, Serialize};

use super::dataset::TrajectoryDataset;
use crate::policy::ActionSet;

pub const DEFAULT_MIN_COUNT: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionMask {
    allowed: Vec<ActionSet>,
    action_count: usize,
}

impl ActionMask {
    /// Every action allowed everywhere.
    pub fn all(state_count: usize, action_count: usize) -> Self {
        Self { allowed: vec![ActionSet::full(action_count); state_count], action_count }
    }

    pub fn allowed(&self, s: usize) -> ActionSet {
        self.allowed[s]
    }

    pub fn is_allowed(&self, s: usize, a: usize) -> bool {
        self.allowed[s].contains(a)
    }

    /// Boolean row for state `s`.
    pub fn row(&self, s: usize) -> Vec<bool> {
        (0..self.action_count).map(|a| self.allowed[s].contains(a)).collect()
    }

    pub fn state_count(&self) -> usize {
        self.allowed.len()
    }
}

/// Allow `(s, a)` when it was seen at least `min_count` times in training.
///
/// When nothing at `s` qualifies, the most frequent actions (all ties) are
/// kept. States never acted in, and terminal states, allow every action.
/// A `min_count` of 0 behaves like 1.
pub fn build_action_mask(dataset: &TrajectoryDataset, min_count: u64) -> ActionMask {
    let m = dataset.action_count();
    let min_count = min_count.max(1);
    let allowed = (0..dataset.state_count())
        .map(|s| {
            let counts = dataset.counts(s);
            let most = counts.iter().copied().max().unwrap_or(0);
            if most == 0 || dataset.is_terminal(s) {
                return ActionSet::full(m);
            }
            let frequent: ActionSet = (0..m).filter(|&a| counts[a] >= min_count).collect();
            if frequent.is_empty() {
                (0..m).filter(|&a| counts[a] == most).collect()
            } else {
                frequent
            }
        })
        .collect();
    ActionMask { allowed, action_count: m }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offline::dataset::{Episode, IngestOptions, SplitFractions, Step};

    fn dataset(pairs: &[(usize, usize, usize)]) -> TrajectoryDataset {
        // Each (s, a, times) becomes `times` one-step episodes into terminal 9.
        let mut episodes = Vec::new();
        for &(s, a, times) in pairs {
            for _ in 0..times {
                let id = format!("e{}", episodes.len());
                episodes.push(Episode { id, steps: vec![Step { s, a, r: 0.0, sp: 9, done: true }] });
            }
        }
        let options = IngestOptions {
            state_count: Some(10),
            action_count: Some(3),
            fractions: SplitFractions { train: 1.0, validation: 0.0, test: 0.0 },
        };
        TrajectoryDataset::from_episodes(episodes, &options).unwrap()
    }

    #[test]
    fn threshold_rule() {
        let mask = build_action_mask(&dataset(&[(0, 0, 7), (0, 1, 3)]), 5);
        assert_eq!(mask.row(0), vec![true, false, false]);
    }

    #[test]
    fn most_frequent_fallback() {
        let mask = build_action_mask(&dataset(&[(0, 0, 2), (0, 1, 1)]), 5);
        assert_eq!(mask.row(0), vec![true, false, false]);
        let tied = build_action_mask(&dataset(&[(0, 0, 2), (0, 2, 2)]), 5);
        assert_eq!(tied.row(0), vec![true, false, true]);
    }

    #[test]
    fn min_count_one_allows_anything_seen() {
        let mask = build_action_mask(&dataset(&[(0, 0, 2), (0, 1, 1)]), 1);
        assert_eq!(mask.row(0), vec![true, true, false]);
        assert_eq!(mask.row(3), vec![true, true, true]);
        assert_eq!(mask.row(9), vec![true, true, true]);
    }
}
