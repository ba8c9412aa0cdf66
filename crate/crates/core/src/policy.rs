//! Set-valued policies: every state maps to a non-empty subset of actions.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SvpError};
use crate::mdp::{QTable, TabularMdp, MAX_ACTIONS};

/// A subset of at most 64 actions stored as a bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ActionSet(u64);

impl ActionSet {
    pub const EMPTY: ActionSet = ActionSet(0);

    pub fn from_bits(bits: u64) -> Self {
        Self(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn full(action_count: usize) -> Self {
        debug_assert!(action_count <= MAX_ACTIONS);
        if action_count == 64 {
            Self(u64::MAX)
        } else {
            Self((1u64 << action_count) - 1)
        }
    }

    pub fn singleton(a: usize) -> Self {
        Self(1u64 << a)
    }

    pub fn contains(self, a: usize) -> bool {
        self.0 >> a & 1 == 1
    }

    pub fn insert(&mut self, a: usize) {
        self.0 |= 1u64 << a;
    }

    pub fn remove(&mut self, a: usize) {
        self.0 &= !(1u64 << a);
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: ActionSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                return None;
            }
            let a = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            Some(a)
        })
    }

    /// Minimum of `values[a]` over the set, or `None` when empty.
    pub fn min_over(self, values: &[f64]) -> Option<f64> {
        self.iter().map(|a| values[a]).reduce(f64::min)
    }

    pub fn max_over(self, values: &[f64]) -> Option<f64> {
        self.iter().map(|a| values[a]).reduce(f64::max)
    }

    pub fn to_vec(self) -> Vec<usize> {
        self.iter().collect()
    }
}

impl FromIterator<usize> for ActionSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut set = ActionSet::EMPTY;
        for a in iter {
            set.insert(a);
        }
        set
    }
}

impl Serialize for ActionSet {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for ActionSet {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let actions = Vec::<usize>::deserialize(de)?;
        if let Some(a) = actions.iter().find(|&&a| a >= MAX_ACTIONS) {
            return Err(serde::de::Error::custom(format!("action index {a} out of range")));
        }
        Ok(actions.into_iter().collect())
    }
}

impl fmt::Display for ActionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, a) in self.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, "}}")
    }
}

/// Actions whose value clears `threshold - slack`.
pub fn threshold_set(values: &[f64], threshold: f64, slack: f64) -> ActionSet {
    values.iter().enumerate().filter(|(_, &q)| q >= threshold - slack).map(|(a, _)| a).collect()
}

/// All actions within `slack` of the row maximum.
pub fn argmax_set(values: &[f64], slack: f64) -> ActionSet {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    threshold_set(values, best, slack)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetValuedPolicy {
    sets: Vec<ActionSet>,
    action_count: usize,
    pub zeta: f64,
    pub gamma: Option<f64>,
    pub source: String,
    pub q: Option<QTable>,
    pub v_star: Option<Vec<f64>>,
}

impl SetValuedPolicy {
    pub fn new(sets: Vec<ActionSet>, action_count: usize, zeta: f64, source: impl Into<String>) -> Result<Self> {
        if action_count == 0 || action_count > MAX_ACTIONS {
            return Err(SvpError::InvalidPolicy(format!("unsupported action count {action_count}")));
        }
        let full = ActionSet::full(action_count);
        for (s, set) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(SvpError::InvalidPolicy(format!("state {s} maps to an empty set")));
            }
            if !set.is_subset(full) {
                return Err(SvpError::InvalidPolicy(format!("state {s} references an unknown action")));
            }
        }
        Ok(Self { sets, action_count, zeta, gamma: None, source: source.into(), q: None, v_star: None })
    }

    /// Every state maps to every action.
    pub fn full(mdp: &TabularMdp, source: impl Into<String>) -> Self {
        let sets = vec![ActionSet::full(mdp.action_count()); mdp.state_count()];
        Self::new(sets, mdp.action_count(), 1.0, source).expect("full sets are valid")
    }

    /// Singleton lowest-index greedy action per non-terminal state.
    pub fn greedy(mdp: &TabularMdp, q: &QTable) -> Self {
        let sets = (0..mdp.state_count())
            .map(|s| {
                if mdp.is_terminal(s) {
                    ActionSet::full(mdp.action_count())
                } else {
                    ActionSet::singleton(q.argmax(s))
                }
            })
            .collect();
        Self::new(sets, mdp.action_count(), 0.0, "greedy").expect("greedy sets are valid")
    }

    pub fn sets(&self) -> &[ActionSet] {
        &self.sets
    }

    pub fn set(&self, s: usize) -> ActionSet {
        self.sets[s]
    }

    pub fn state_count(&self) -> usize {
        self.sets.len()
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn contains(&self, s: usize, a: usize) -> bool {
        self.sets[s].contains(a)
    }

    /// Total number of (state, action) memberships over non-terminal states.
    pub fn decision_size(&self, terminal: &[bool]) -> usize {
        self.sets.iter().zip(terminal).filter(|(_, &t)| !t).map(|(set, _)| set.len()).sum()
    }

    pub fn with_sets(&self, sets: Vec<ActionSet>) -> Result<Self> {
        let mut next = Self::new(sets, self.action_count, self.zeta, self.source.clone())?;
        next.gamma = self.gamma;
        Ok(next)
    }

    /// Check dimensions against an MDP and that terminal states carry the full set.
    pub fn validate_for(&self, mdp: &TabularMdp) -> Result<()> {
        if self.sets.len() != mdp.state_count() || self.action_count != mdp.action_count() {
            return Err(SvpError::InvalidPolicy(format!(
                "policy shape {}x{} does not match MDP {}x{}",
                self.sets.len(),
                self.action_count,
                mdp.state_count(),
                mdp.action_count()
            )));
        }
        let full = ActionSet::full(mdp.action_count());
        if let Some(s) = (0..mdp.state_count()).find(|&s| mdp.is_terminal(s) && self.sets[s] != full) {
            return Err(SvpError::InvalidPolicy(format!("terminal state {s} must map to every action")));
        }
        Ok(())
    }

    pub fn same_sets(&self, other: &SetValuedPolicy) -> bool {
        self.sets == other.sets
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }

    fn document(&self) -> PolicyDocument {
        PolicyDocument {
            zeta: self.zeta,
            gamma: self.gamma,
            source: self.source.clone(),
            sets: self.sets.iter().enumerate().map(|(s, set)| (s, set.to_vec())).collect(),
            q: self.q.as_ref().map(QTable::rows),
            v_star: self.v_star.clone(),
        }
    }

    fn from_document(doc: PolicyDocument) -> Result<Self> {
        let state_count = doc.sets.keys().next_back().map_or(0, |&s| s + 1);
        if doc.sets.len() != state_count {
            return Err(SvpError::InvalidPolicy("policy sets must cover states 0..n".into()));
        }
        let q = doc.q.as_deref().map(QTable::from_rows).transpose()?;
        if let Some(a) = doc.sets.values().flatten().find(|&&a| a >= MAX_ACTIONS) {
            return Err(SvpError::InvalidPolicy(format!("action index {a} out of range")));
        }
        let action_count = match &q {
            Some(q) => q.action_count(),
            None => doc.sets.values().flatten().map(|&a| a + 1).max().unwrap_or(0),
        };
        let sets = doc.sets.values().map(|v| v.iter().copied().collect()).collect();
        let mut policy = Self::new(sets, action_count, doc.zeta, doc.source)?;
        policy.gamma = doc.gamma;
        policy.q = q;
        policy.v_star = doc.v_star;
        Ok(policy)
    }
}

impl Serialize for SetValuedPolicy {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        self.document().serialize(ser)
    }
}

impl<'de> Deserialize<'de> for SetValuedPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let doc = PolicyDocument::deserialize(de)?;
        Self::from_document(doc).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyDocument {
    zeta: f64,
    #[serde(default)]
    gamma: Option<f64>,
    source: String,
    sets: BTreeMap<usize, Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v_star: Option<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_set_rejected() {
        let err = SetValuedPolicy::new(vec![ActionSet::singleton(0), ActionSet::EMPTY], 2, 0.1, "t");
        assert!(matches!(err, Err(SvpError::InvalidPolicy(_))));
    }

    #[test]
    fn threshold_and_argmax_sets() {
        let row = [1.0, 1.05, 1.04, 0.0];
        assert_eq!(threshold_set(&row, 1.029, 0.0).to_vec(), vec![1, 2]);
        assert_eq!(argmax_set(&[2.0, 2.0, 1.0], 0.0).to_vec(), vec![0, 1]);
    }

    #[test]
    fn policy_json_keys_are_state_indices() {
        let mut p =
            SetValuedPolicy::new(vec![ActionSet::from_iter([1, 3]), ActionSet::full(4)], 4, 0.05, "near-greedy-td")
                .unwrap();
        p.gamma = Some(0.9);
        p.v_star = Some(vec![1.0, 0.0]);
        p.q = Some(QTable::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![0.0; 4]]).unwrap());
        let text = p.to_json();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["sets"]["0"], serde_json::json!([1, 3]));
        assert_eq!(value["source"], "near-greedy-td");
        assert_eq!(SetValuedPolicy::from_json(&text).unwrap(), p);
    }

    proptest! {
        #[test]
        fn action_set_round_trips(bits in 1u64..(1 << 10)) {
            let set = ActionSet::from_bits(bits);
            let back: ActionSet = set.to_vec().into_iter().collect();
            prop_assert_eq!(back, set);
            prop_assert_eq!(set.len(), set.to_vec().len());
        }
    }
}
