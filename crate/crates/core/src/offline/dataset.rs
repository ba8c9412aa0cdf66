//! Logged trajectories: JSON-lines ingestion, a hash-ordered split, and
//! per-pair visit counts over the training split.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SvpError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub sp: usize,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub steps: Vec<Step>,
}

impl Episode {
    /// Discounted return of the logged rewards.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.steps.iter().rev().fold(0.0, |acc, step| step.r + gamma * acc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.7, validation: 0.1, test: 0.2 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SvpError::InvalidConfig(format!(
                "split fractions {parts:?} must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }

    /// Episode counts per split for `n` episodes.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = ((self.train * n as f64).round() as usize).min(n);
        let validation = ((self.validation * n as f64).round() as usize).min(n - train);
        (train, validation, n - train - validation)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Declared state count; inferred as `max index + 1` when absent.
    pub state_count: Option<usize>,
    pub action_count: Option<usize>,
    pub fractions: SplitFractions,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    state_count: usize,
    action_count: usize,
    episodes: Vec<Episode>,
    splits: Vec<Split>,
    counts: Vec<u64>,
    terminal: Vec<bool>,
}

impl TrajectoryDataset {
    pub fn from_episodes(episodes: Vec<Episode>, options: &IngestOptions) -> Result<Self> {
        options.fractions.validate()?;
        if episodes.is_empty() {
            return Err(SvpError::Dataset("no episodes".into()));
        }
        let mut seen = HashSet::new();
        for ep in &episodes {
            if !seen.insert(ep.id.as_str()) {
                return Err(SvpError::Dataset(format!("duplicate episode id {:?}", ep.id)));
            }
            check_episode(ep)?;
        }
        let max_state = episodes.iter().flat_map(|e| &e.steps).map(|t| t.s.max(t.sp)).max().unwrap_or(0);
        let max_action = episodes.iter().flat_map(|e| &e.steps).map(|t| t.a).max().unwrap_or(0);
        let state_count = resolve_count(options.state_count, max_state, "state")?;
        let action_count = resolve_count(options.action_count, max_action, "action")?;
        if action_count > crate::mdp::MAX_ACTIONS {
            return Err(SvpError::Dataset(format!("{action_count} actions exceed the supported maximum")));
        }

        let mut order: Vec<usize> = (0..episodes.len()).collect();
        order.sort_by(|&i, &j| {
            let key = |k: usize| (fnv1a(episodes[k].id.as_bytes()), &episodes[k].id);
            key(i).cmp(&key(j))
        });
        let (train, validation, _) = options.fractions.sizes(episodes.len());
        let mut splits = vec![Split::Test; episodes.len()];
        for (rank, &i) in order.iter().enumerate() {
            splits[i] = if rank < train {
                Split::Train
            } else if rank < train + validation {
                Split::Validation
            } else {
                Split::Test
            };
        }

        let mut counts = vec![0u64; state_count * action_count];
        let mut source = vec![false; state_count];
        let mut done_target = vec![false; state_count];
        for (ep, split) in episodes.iter().zip(&splits) {
            for step in &ep.steps {
                source[step.s] = true;
                if step.done {
                    done_target[step.sp] = true;
                }
                if *split == Split::Train {
                    counts[step.s * action_count + step.a] += 1;
                }
            }
        }
        let terminal = (0..state_count).map(|s| done_target[s] && !source[s]).collect();
        Ok(Self { state_count, action_count, episodes, splits, counts, terminal })
    }

    /// Parse one episode per non-blank line.
    pub fn from_jsonl<R: BufRead>(reader: R, options: &IngestOptions) -> Result<Self> {
        let mut episodes = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let episode: Episode =
                serde_json::from_str(&line).map_err(|e| SvpError::Parse { line: i + 1, message: e.to_string() })?;
            check_episode(&episode).map_err(|e| SvpError::Parse { line: i + 1, message: e.to_string() })?;
            if let Some(step) = episode.steps.iter().find(|t| out_of_range(t, options)) {
                return Err(SvpError::Parse { line: i + 1, message: format!("index out of range in step {step:?}") });
            }
            episodes.push(episode);
        }
        Self::from_episodes(episodes, options)
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        for ep in &self.episodes {
            serde_json::to_writer(&mut writer, ep)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn split_of(&self, episode: usize) -> Split {
        self.splits[episode]
    }

    pub fn split(&self, split: Split) -> Vec<&Episode> {
        self.episodes.iter().zip(&self.splits).filter(|(_, &s)| s == split).map(|(e, _)| e).collect()
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let count = |target| self.splits.iter().filter(|&&s| s == target).count();
        (count(Split::Train), count(Split::Validation), count(Split::Test))
    }

    /// Training-split visit counts for state `s`.
    pub fn counts(&self, s: usize) -> &[u64] {
        &self.counts[s * self.action_count..(s + 1) * self.action_count]
    }

    pub fn count(&self, s: usize, a: usize) -> u64 {
        self.counts[s * self.action_count + a]
    }

    /// States reached by a terminating step and never acted in.
    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }
}

fn resolve_count(declared: Option<usize>, max_index: usize, what: &str) -> Result<usize> {
    match declared {
        Some(n) if n > max_index => Ok(n),
        Some(n) => Err(SvpError::Dataset(format!("{what} index {max_index} out of range for {n} {what}s"))),
        None => Ok(max_index + 1),
    }
}

fn out_of_range(step: &Step, options: &IngestOptions) -> bool {
    let bad_state = options.state_count.is_some_and(|n| step.s >= n || step.sp >= n);
    let bad_action = options.action_count.is_some_and(|m| step.a >= m);
    bad_state || bad_action
}

fn check_episode(ep: &Episode) -> Result<()> {
    let Some(last) = ep.steps.last() else {
        return Err(SvpError::Dataset(format!("episode {:?} has no steps", ep.id)));
    };
    if !last.done {
        return Err(SvpError::Dataset(format!("episode {:?} does not end with done", ep.id)));
    }
    if ep.steps[..ep.steps.len() - 1].iter().any(|t| t.done) {
        return Err(SvpError::Dataset(format!("episode {:?} continues after done", ep.id)));
    }
    if let Some(t) = ep.steps.iter().find(|t| !t.r.is_finite()) {
        return Err(SvpError::Dataset(format!("episode {:?} has a non-finite reward {}", ep.id, t.r)));
    }
    Ok(())
}
