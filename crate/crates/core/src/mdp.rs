//! Finite tabular MDPs and the tables indexed by them.
//!
//! Transitions are stored densely per `(s, a)` together with a sparse list of
//! the positive-probability successors, which is what every solver iterates.
//! Terminal states are absorbing: every action self-loops with probability one
//! and reward zero, so `V(terminal) = 0` under any policy. Bonuses for reaching
//! a terminal are attached to the transition that enters it.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dag;
use crate::error::{Result, SvpError};

/// Probabilities and distributions must sum to one within this tolerance.
pub const PROB_TOLERANCE: f64 = 1e-9;

/// Policies store action sets as 64-bit masks.
pub const MAX_ACTIONS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    state_count: usize,
    action_count: usize,
    transition: Vec<f64>,
    successors: Vec<Vec<(usize, f64)>>,
    reward: Vec<f64>,
    gamma: f64,
    terminal: Vec<bool>,
    start: Vec<f64>,
    state_labels: Vec<String>,
    action_labels: Vec<String>,
}

impl TabularMdp {
    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal
    }

    pub fn terminal_states(&self) -> Vec<usize> {
        (0..self.state_count).filter(|&s| self.terminal[s]).collect()
    }

    pub fn start_distribution(&self) -> &[f64] {
        &self.start
    }

    pub fn state_label(&self, s: usize) -> &str {
        &self.state_labels[s]
    }

    pub fn action_label(&self, a: usize) -> &str {
        &self.action_labels[a]
    }

    pub fn state_labels(&self) -> &[String] {
        &self.state_labels
    }

    pub fn action_labels(&self) -> &[String] {
        &self.action_labels
    }

    /// `P(s' | s, a)`.
    pub fn probability(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[(s * self.action_count + a) * self.state_count + next]
    }

    /// Positive-probability successors of `(s, a)` in increasing state order.
    pub fn successors(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.successors[s * self.action_count + a]
    }

    /// Expected immediate reward `r(s, a)`.
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.action_count + a]
    }

    /// `r(s, a) + gamma * E[value(s')]`.
    ///
    /// Every construction in the crate goes through this function so that two
    /// routes computing the same backup produce bit-identical results.
    #[inline]
    pub fn backup(&self, s: usize, a: usize, value: &[f64]) -> f64 {
        let expected: f64 = self.successors(s, a).iter().map(|&(next, p)| p * value[next]).sum();
        self.reward(s, a) + self.gamma * expected
    }

    /// Like [`TabularMdp::backup`] but with an explicit discount on the future term.
    #[inline]
    pub fn backup_scaled(&self, s: usize, a: usize, value: &[f64], future_scale: f64) -> f64 {
        let expected: f64 = self.successors(s, a).iter().map(|&(next, p)| p * value[next]).sum();
        self.reward(s, a) + self.gamma * future_scale * expected
    }

    /// True if every non-terminal `(s, a)` has exactly one successor.
    pub fn is_deterministic(&self) -> bool {
        self.first_stochastic().is_none()
    }

    pub(crate) fn first_stochastic(&self) -> Option<(usize, usize)> {
        (0..self.state_count)
            .filter(|&s| !self.terminal[s])
            .flat_map(|s| (0..self.action_count).map(move |a| (s, a)))
            .find(|&(s, a)| self.successors(s, a).len() != 1)
    }

    /// The single successor of a deterministic transition.
    pub fn deterministic_next(&self, s: usize, a: usize) -> Option<usize> {
        match self.successors(s, a) {
            [(next, _)] => Some(*next),
            _ => None,
        }
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn min_reward(&self) -> f64 {
        self.reward.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_reward(&self) -> f64 {
        self.reward.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Copy of this MDP with a different discount factor.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut builder = MdpBuilder::from_mdp(self);
        builder.gamma = gamma;
        builder.build()
    }

    /// Relabel states with `perm[old] = new`. Used by invariance tests.
    pub fn permute_states(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.state_count {
            return Err(SvpError::InvalidConfig("permutation length mismatch".into()));
        }
        let mut b = MdpBuilder::new(self.state_count, self.action_count, self.gamma);
        let mut start = vec![0.0; self.state_count];
        let mut labels = vec![String::new(); self.state_count];
        for s in 0..self.state_count {
            let ns = perm[s];
            start[ns] = self.start[s];
            labels[ns] = self.state_labels[s].clone();
            if self.terminal[s] {
                b.terminal(ns);
                continue;
            }
            for a in 0..self.action_count {
                let next: Vec<(usize, f64)> = self.successors(s, a).iter().map(|&(n, p)| (perm[n], p)).collect();
                b.transition(ns, a, &next);
                b.reward(ns, a, self.reward(s, a));
            }
        }
        b.start(start);
        b.state_labels(labels);
        b.action_labels(self.action_labels.clone());
        b.build()
    }
}

/// Incremental constructor for [`TabularMdp`]; `build` checks every invariant.
#[derive(Debug, Clone)]
pub struct MdpBuilder {
    state_count: usize,
    action_count: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    pub gamma: f64,
    terminal: Vec<bool>,
    start: Option<Vec<f64>>,
    state_labels: Option<Vec<String>>,
    action_labels: Option<Vec<String>>,
}

impl MdpBuilder {
    pub fn new(state_count: usize, action_count: usize, gamma: f64) -> Self {
        Self {
            state_count,
            action_count,
            transition: vec![0.0; state_count * action_count * state_count],
            reward: vec![0.0; state_count * action_count],
            gamma,
            terminal: vec![false; state_count],
            start: None,
            state_labels: None,
            action_labels: None,
        }
    }

    pub fn from_mdp(mdp: &TabularMdp) -> Self {
        Self {
            state_count: mdp.state_count,
            action_count: mdp.action_count,
            transition: mdp.transition.clone(),
            reward: mdp.reward.clone(),
            gamma: mdp.gamma,
            terminal: mdp.terminal.clone(),
            start: Some(mdp.start.clone()),
            state_labels: Some(mdp.state_labels.clone()),
            action_labels: Some(mdp.action_labels.clone()),
        }
    }

    /// Replace the successor distribution of `(s, a)`. Repeated successors accumulate.
    pub fn transition(&mut self, s: usize, a: usize, next: &[(usize, f64)]) -> &mut Self {
        let base = (s * self.action_count + a) * self.state_count;
        self.transition[base..base + self.state_count].fill(0.0);
        for &(n, p) in next {
            self.transition[base + n] += p;
        }
        self
    }

    pub fn reward(&mut self, s: usize, a: usize, r: f64) -> &mut Self {
        self.reward[s * self.action_count + a] = r;
        self
    }

    pub fn terminal(&mut self, s: usize) -> &mut Self {
        self.terminal[s] = true;
        self
    }

    pub fn start(&mut self, start: Vec<f64>) -> &mut Self {
        self.start = Some(start);
        self
    }

    pub fn start_state(&mut self, s: usize) -> &mut Self {
        let mut start = vec![0.0; self.state_count];
        start[s] = 1.0;
        self.start = Some(start);
        self
    }

    pub fn state_labels(&mut self, labels: Vec<String>) -> &mut Self {
        self.state_labels = Some(labels);
        self
    }

    pub fn action_labels(&mut self, labels: Vec<String>) -> &mut Self {
        self.action_labels = Some(labels);
        self
    }

    pub fn build(&self) -> Result<TabularMdp> {
        let (n, m) = (self.state_count, self.action_count);
        if n == 0 || m == 0 {
            return Err(SvpError::InvalidMdp("state and action counts must be positive".into()));
        }
        if m > MAX_ACTIONS {
            return Err(SvpError::InvalidMdp(format!("{m} actions exceeds the supported maximum of {MAX_ACTIONS}")));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(SvpError::InvalidMdp(format!("gamma {} outside [0, 1]", self.gamma)));
        }

        let mut transition = self.transition.clone();
        let mut reward = self.reward.clone();
        for s in 0..n {
            for a in 0..m {
                let base = (s * m + a) * n;
                let row = &mut transition[base..base + n];
                if let Some((next, p)) = row.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
                    return Err(SvpError::InvalidMdp(format!("P({next} | {s}, {a}) = {p} is not a probability")));
                }
                if !reward[s * m + a].is_finite() {
                    return Err(SvpError::InvalidMdp(format!("reward at ({s}, {a}) is not finite")));
                }
                if self.terminal[s] {
                    let empty = row.iter().all(|&p| p == 0.0);
                    let self_loop = row.iter().enumerate().all(|(i, &p)| if i == s { p == 1.0 } else { p == 0.0 });
                    if !(empty || self_loop) || reward[s * m + a] != 0.0 {
                        return Err(SvpError::InvalidMdp(format!(
                            "terminal state {s} must self-loop with zero reward"
                        )));
                    }
                    row.fill(0.0);
                    row[s] = 1.0;
                    reward[s * m + a] = 0.0;
                } else {
                    let total: f64 = row.iter().sum();
                    if (total - 1.0).abs() > PROB_TOLERANCE {
                        return Err(SvpError::InvalidMdp(format!(
                            "transition probabilities of ({s}, {a}) sum to {total}"
                        )));
                    }
                }
            }
        }

        let start = match &self.start {
            Some(start) => start.clone(),
            None => {
                let first = (0..n)
                    .find(|&s| !self.terminal[s])
                    .ok_or_else(|| SvpError::InvalidMdp("every state is terminal".into()))?;
                let mut start = vec![0.0; n];
                start[first] = 1.0;
                start
            }
        };
        if start.len() != n {
            return Err(SvpError::InvalidMdp("start distribution length mismatch".into()));
        }
        if start.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(SvpError::InvalidMdp("start distribution has a negative entry".into()));
        }
        let total: f64 = start.iter().sum();
        if (total - 1.0).abs() > PROB_TOLERANCE {
            return Err(SvpError::InvalidMdp(format!("start distribution sums to {total}")));
        }
        if let Some(s) = (0..n).find(|&s| self.terminal[s] && start[s] > 0.0) {
            return Err(SvpError::InvalidMdp(format!("start distribution puts mass on terminal state {s}")));
        }

        let state_labels = match &self.state_labels {
            Some(l) if l.len() == n => l.clone(),
            Some(_) => return Err(SvpError::InvalidMdp("state label count mismatch".into())),
            None => (0..n).map(|s| format!("s{s}")).collect(),
        };
        let action_labels = match &self.action_labels {
            Some(l) if l.len() == m => l.clone(),
            Some(_) => return Err(SvpError::InvalidMdp("action label count mismatch".into())),
            None => (0..m).map(|a| format!("a{a}")).collect(),
        };

        let successors = (0..n * m)
            .map(|sa| {
                let row = &transition[sa * n..(sa + 1) * n];
                row.iter().enumerate().filter(|(_, p)| **p > 0.0).map(|(next, p)| (next, *p)).collect()
            })
            .collect();

        let mdp = TabularMdp {
            state_count: n,
            action_count: m,
            transition,
            successors,
            reward,
            gamma: self.gamma,
            terminal: self.terminal.clone(),
            start,
            state_labels,
            action_labels,
        };
        if mdp.gamma >= 1.0 && dag::has_reachable_cycle(&mdp) {
            return Err(SvpError::InvalidMdp("gamma = 1 requires the reachable transition graph to be acyclic".into()));
        }
        Ok(mdp)
    }
}

/// Action values indexed by `(state, action)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    state_count: usize,
    action_count: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(state_count: usize, action_count: usize) -> Self {
        Self { state_count, action_count, values: vec![0.0; state_count * action_count] }
    }

    pub fn for_mdp(mdp: &TabularMdp) -> Self {
        Self::zeros(mdp.state_count(), mdp.action_count())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let action_count = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != action_count) {
            return Err(SvpError::InvalidConfig("ragged Q table".into()));
        }
        Ok(Self { state_count: rows.len(), action_count, values: rows.concat() })
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.action_count + a]
    }

    #[inline]
    pub fn set(&mut self, s: usize, a: usize, value: f64) {
        self.values[s * self.action_count + a] = value;
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.action_count..(s + 1) * self.action_count]
    }

    #[inline]
    pub fn row_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.values[s * self.action_count..(s + 1) * self.action_count]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.state_count).map(|s| self.row(s).to_vec()).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Lowest-index maximizing action.
    pub fn argmax(&self, s: usize) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for (a, &q) in row.iter().enumerate() {
            if q > row[best] {
                best = a;
            }
        }
        best
    }

    /// Greedy state values `max_a Q(s, a)`, zero at terminal states.
    pub fn greedy_values(&self, terminal: &[bool]) -> ValueTable {
        ValueTable((0..self.state_count).map(|s| if terminal[s] { 0.0 } else { self.max(s) }).collect())
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// State values indexed by state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValueTable(pub Vec<f64>);

impl ValueTable {
    pub fn sup_norm(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ValueTable {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ValueTable {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// One sampled interaction step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub reward: f64,
    pub next: usize,
    pub done: bool,
}

/// Something a TD learner can interact with.
pub trait Environment {
    fn state_count(&self) -> usize;
    fn action_count(&self) -> usize;
    fn gamma(&self) -> f64;
    fn is_terminal(&self, state: usize) -> bool;
    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> usize;
    fn step<R: Rng + ?Sized>(&self, state: usize, action: usize, rng: &mut R) -> Transition;
}

/// Draw an index from a discrete distribution given as `(index, probability)` pairs.
pub fn sample_index<R: Rng + ?Sized>(dist: impl IntoIterator<Item = (usize, f64)>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in dist {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

impl Environment for TabularMdp {
    fn state_count(&self) -> usize {
        self.state_count
    }

    fn action_count(&self) -> usize {
        self.action_count
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn is_terminal(&self, state: usize) -> bool {
        self.terminal[state]
    }

    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(self.start.iter().copied().enumerate(), rng)
    }

    fn step<R: Rng + ?Sized>(&self, state: usize, action: usize, rng: &mut R) -> Transition {
        let next = sample_index(self.successors(state, action).iter().copied(), rng);
        Transition { reward: self.reward(state, action), next, done: self.terminal[next] }
    }
}

// ---------------------------------------------------------------------------
// JSON interchange format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NextEntry {
    sp: usize,
    p: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TransitionEntry {
    s: usize,
    a: usize,
    next: Vec<NextEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RewardEntry {
    s: usize,
    a: usize,
    r: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MdpDocument {
    states: Vec<String>,
    actions: Vec<String>,
    gamma: f64,
    terminal: Vec<usize>,
    start: Vec<f64>,
    transitions: Vec<TransitionEntry>,
    rewards: Vec<RewardEntry>,
}

impl TabularMdp {
    /// Serialize to the interchange JSON format. Terminal rows are implicit.
    pub fn to_json(&self) -> String {
        let mut transitions = Vec::new();
        let mut rewards = Vec::new();
        for s in (0..self.state_count).filter(|&s| !self.terminal[s]) {
            for a in 0..self.action_count {
                transitions.push(TransitionEntry {
                    s,
                    a,
                    next: self.successors(s, a).iter().map(|&(sp, p)| NextEntry { sp, p }).collect(),
                });
                rewards.push(RewardEntry { s, a, r: self.reward(s, a) });
            }
        }
        let doc = MdpDocument {
            states: self.state_labels.clone(),
            actions: self.action_labels.clone(),
            gamma: self.gamma,
            terminal: self.terminal_states(),
            start: self.start.clone(),
            transitions,
            rewards,
        };
        serde_json::to_string_pretty(&doc).expect("MDP document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDocument = serde_json::from_str(text)?;
        let (n, m) = (doc.states.len(), doc.actions.len());
        let mut b = MdpBuilder::new(n, m, doc.gamma);
        let check = |s: usize, a: usize| -> Result<()> {
            if s >= n || a >= m {
                return Err(SvpError::InvalidMdp(format!("entry ({s}, {a}) out of range")));
            }
            Ok(())
        };
        for &t in &doc.terminal {
            if t >= n {
                return Err(SvpError::InvalidMdp(format!("terminal index {t} out of range")));
            }
            b.terminal(t);
        }
        for entry in &doc.transitions {
            check(entry.s, entry.a)?;
            if let Some(bad) = entry.next.iter().find(|e| e.sp >= n) {
                return Err(SvpError::InvalidMdp(format!("successor {} out of range", bad.sp)));
            }
            let next: Vec<(usize, f64)> = entry.next.iter().map(|e| (e.sp, e.p)).collect();
            b.transition(entry.s, entry.a, &next);
        }
        for entry in &doc.rewards {
            check(entry.s, entry.a)?;
            b.reward(entry.s, entry.a, entry.r);
        }
        b.start(doc.start);
        b.state_labels(doc.states);
        b.action_labels(doc.actions);
        b.build()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> MdpBuilder {
        let mut b = MdpBuilder::new(2, 2, 0.9);
        b.transition(0, 0, &[(1, 1.0)]).transition(0, 1, &[(0, 0.5), (1, 0.5)]);
        b.reward(0, 0, 1.0).reward(0, 1, 0.25).terminal(1);
        b
    }

    #[test]
    fn terminal_rows_are_absorbing() {
        let mdp = two_state().build().unwrap();
        for a in 0..2 {
            assert_eq!(mdp.successors(1, a), &[(1, 1.0)]);
            assert_eq!(mdp.reward(1, a), 0.0);
        }
        assert_eq!(mdp.start_distribution(), &[1.0, 0.0]);
    }

    #[test]
    fn rejects_bad_rows() {
        let mut b = two_state();
        b.transition(0, 0, &[(1, 0.7)]);
        assert!(matches!(b.build(), Err(SvpError::InvalidMdp(_))));

        let mut b = two_state();
        b.reward(1, 0, 1.0);
        assert!(b.build().is_err());

        let mut b = two_state();
        b.start(vec![0.5, 0.5]);
        assert!(b.build().is_err());

        let mut b = two_state();
        b.gamma = 1.0;
        // (0, 1) self-loops, so gamma = 1 is rejected.
        assert!(b.build().is_err());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut b = two_state();
        b.transition(0, 1, &[(0, 0.1), (1, 0.9)]);
        b.reward(0, 1, 0.1 + 0.2);
        b.gamma = 0.987_654_321_012_345_6;
        let mdp = b.build().unwrap();
        let text = mdp.to_json();
        let back = TabularMdp::from_json(&text).unwrap();
        assert_eq!(mdp, back);
        assert_eq!(back.to_json(), text);
        assert_eq!(back.reward(0, 1).to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn qtable_helpers() {
        let q = QTable::from_rows(&[vec![1.0, 3.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(q.argmax(0), 1);
        assert_eq!(q.max(0), 3.0);
        assert_eq!(q.greedy_values(&[false, true]).0, vec![3.0, 0.0]);
        assert!(QTable::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
