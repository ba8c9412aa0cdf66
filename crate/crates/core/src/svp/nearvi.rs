//! Near-greedy value iteration: synchronous worst-case sweeps whose candidate
//! sets are re-derived from the current Q at every sweep.

use serde::Serialize;

use super::{check_v_star, check_zeta, near_greedy_set, near_greedy_target, sets_from_rows, MEMBERSHIP_SLACK};
use crate::error::{Result, SvpError};
use crate::mdp::{QTable, TabularMdp};
use crate::policy::{ActionSet, SetValuedPolicy};
use crate::solve::{stop_threshold, DEFAULT_TOLERANCE};

pub const DEFAULT_MAX_SWEEPS: usize = 10_000;

/// Checkpoints over which the derived SVP must stay unchanged.
pub const DEFAULT_WINDOW: usize = 50;

/// Per-checkpoint record of the derived SVP and the Q movement since the
/// previous checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTrace {
    #[serde(skip)]
    pub snapshots: Vec<Vec<ActionSet>>,
    #[serde(skip)]
    pub q_deltas: Vec<f64>,
    pub converged: bool,
    pub stabilization_window: usize,
    /// Sweeps or episodes between checkpoints.
    pub checkpoint_interval: usize,
    pub delta_threshold: f64,
    pub unit: &'static str,
}

impl ConvergenceTrace {
    pub fn new(
        stabilization_window: usize,
        checkpoint_interval: usize,
        delta_threshold: f64,
        unit: &'static str,
    ) -> Self {
        Self {
            snapshots: Vec::new(),
            q_deltas: Vec::new(),
            converged: false,
            stabilization_window,
            checkpoint_interval,
            delta_threshold,
            unit,
        }
    }

    /// Record a checkpoint and refresh the `converged` flag.
    pub fn record(&mut self, sets: Vec<ActionSet>, q_delta: f64) -> bool {
        self.snapshots.push(sets);
        self.q_deltas.push(q_delta);
        self.converged = self.sets_stable() && q_delta <= self.delta_threshold;
        self.converged
    }

    /// True when the last `stabilization_window` snapshots are identical.
    pub fn sets_stable(&self) -> bool {
        let w = self.stabilization_window.max(1);
        if self.snapshots.len() < w {
            return false;
        }
        let tail = &self.snapshots[self.snapshots.len() - w..];
        tail.iter().all(|s| *s == tail[0])
    }

    pub fn checkpoints(&self) -> usize {
        self.snapshots.len()
    }

    pub fn final_sets(&self) -> Option<&[ActionSet]> {
        self.snapshots.last().map(Vec::as_slice)
    }

    /// Number of membership changes between consecutive snapshots in the window.
    pub fn recent_changes(&self) -> usize {
        let start = self.snapshots.len().saturating_sub(self.stabilization_window.max(1));
        self.snapshots[start..].windows(2).filter(|w| w[0] != w[1]).count()
    }

    /// States whose membership changed at least once inside the window.
    pub fn unstable_states(&self) -> Vec<usize> {
        let start = self.snapshots.len().saturating_sub(self.stabilization_window.max(1));
        let tail = &self.snapshots[start..];
        let Some(first) = tail.first() else { return Vec::new() };
        (0..first.len()).filter(|&s| tail.iter().any(|snap| snap[s] != first[s])).collect()
    }

    pub fn summary(&self) -> String {
        let last = self.q_deltas.last().copied().unwrap_or(f64::NAN);
        if self.converged {
            format!(
                "converged after {} {}s (last Q delta {last:.3e})",
                self.checkpoints() * self.checkpoint_interval,
                self.unit
            )
        } else {
            format!(
                "not converged after {} {}s: {} membership changes in the last {} checkpoints at states {:?}, last Q delta {last:.3e}",
                self.checkpoints() * self.checkpoint_interval,
                self.unit,
                self.recent_changes(),
                self.stabilization_window,
                self.unstable_states()
            )
        }
    }
}

/// Synchronous near-greedy value iteration from `Q = 0`.
///
/// Each sweep backs up `r + gamma E[target(s')]` where `target` is the minimum
/// of `Q_k(s', .)` over `{a : Q_k(s',a) >= (1 - zeta) V*(s')}`, or the maximum
/// when that set is empty or `V*(s') < 0`. Returns the policy only when the
/// trace reports convergence.
pub fn near_greedy_vi(
    mdp: &TabularMdp,
    v_star: &[f64],
    zeta: f64,
    max_sweeps: usize,
    window: usize,
) -> Result<(Option<SetValuedPolicy>, ConvergenceTrace)> {
    check_zeta(zeta)?;
    check_v_star(mdp, v_star)?;
    if window == 0 || max_sweeps == 0 {
        return Err(SvpError::InvalidConfig("max_sweeps and window must be positive".into()));
    }
    let full = ActionSet::full(mdp.action_count());
    let n = mdp.state_count();
    let mut trace = ConvergenceTrace::new(window, 1, 0.0, "sweep");
    let mut q = QTable::for_mdp(mdp);
    let mut target = vec![0.0; n];
    for _ in 0..max_sweeps {
        for s in (0..n).filter(|&s| !mdp.is_terminal(s)) {
            target[s] = near_greedy_target(q.row(s), full, v_star[s], zeta, MEMBERSHIP_SLACK).1;
        }
        let mut next = QTable::for_mdp(mdp);
        for s in (0..n).filter(|&s| !mdp.is_terminal(s)) {
            for a in 0..mdp.action_count() {
                next.set(s, a, mdp.backup(s, a, &target));
            }
        }
        let delta = next.sup_distance(&q);
        q = next;
        trace.delta_threshold = stop_threshold(DEFAULT_TOLERANCE, mdp.gamma(), q.sup_norm());
        let sets = sets_from_rows(mdp, |s| near_greedy_set(q.row(s), full, v_star[s], zeta, MEMBERSHIP_SLACK));
        if trace.record(sets, delta) {
            break;
        }
    }
    if !trace.converged {
        return Ok((None, trace));
    }
    let sets = trace.final_sets().expect("at least one sweep").to_vec();
    let mut policy = SetValuedPolicy::new(sets, mdp.action_count(), zeta, "near-greedy-vi")?;
    policy.gamma = Some(mdp.gamma());
    policy.q = Some(q);
    policy.v_star = Some(v_star.to_vec());
    Ok((Some(policy), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env;
    use crate::solve::value_iteration;
    use crate::svp::near_greedy_construct_dag;

    #[test]
    fn chain5_matches_construction_bit_for_bit() {
        let mdp = env::build_chain(5, 0, 0.9).unwrap();
        let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        for zeta in [0.0, 0.01, 0.03, 0.05, 0.1, 0.2, 1.0] {
            let (p, trace) = near_greedy_vi(&mdp, &v, zeta, DEFAULT_MAX_SWEEPS, DEFAULT_WINDOW).unwrap();
            assert!(trace.converged, "{}", trace.summary());
            let p = p.unwrap();
            let c = near_greedy_construct_dag(&mdp, &v, zeta).unwrap();
            assert!(p.same_sets(&c), "zeta {zeta}");
            assert_eq!(p.q, c.q);
        }
    }

    #[test]
    fn appendix_c_never_settles() {
        let mdp = env::build_appendix_c_mdp();
        let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        let (p, trace) = near_greedy_vi(&mdp, &v, 0.2, 2_000, DEFAULT_WINDOW).unwrap();
        assert!(p.is_none());
        assert!(!trace.converged);
        assert_eq!(trace.unstable_states(), vec![1]);
        assert!(trace.summary().starts_with("not converged"));
    }

    #[test]
    fn trace_window_logic() {
        let mut t = ConvergenceTrace::new(3, 1, 0.1, "sweep");
        let a = vec![ActionSet::singleton(0)];
        let b = vec![ActionSet::singleton(1)];
        assert!(!t.record(a.clone(), 0.0));
        assert!(!t.record(a.clone(), 0.0));
        assert!(t.record(a.clone(), 0.0));
        assert!(!t.record(b.clone(), 0.0));
        t.record(b.clone(), 0.0);
        assert!(!t.record(b, 0.5));
    }
}
