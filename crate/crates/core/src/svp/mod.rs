//! Set-valued policy constructions and the checks built on them.

mod analysis;
mod construct;
mod nearvi;

pub use analysis::{
    exponential_action_space_check, fixed_point_violations, nonexistence_check, nonexistence_check_guarded,
    CandidateOutcome, ExtendedSpaceReport, NonexistenceReport, Violation, ViolationKind, DEFAULT_ENUMERATION_GUARD,
    MAX_EXTENDED_ACTIONS,
};
pub use construct::{additive_epsilon, additive_svp, conservative_svp, near_greedy_construct_dag, qstar_based_svp};
pub use nearvi::{near_greedy_vi, ConvergenceTrace, DEFAULT_MAX_SWEEPS, DEFAULT_WINDOW};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SvpError};
use crate::mdp::{QTable, TabularMdp};
use crate::policy::{argmax_set, threshold_set, ActionSet, SetValuedPolicy};
use crate::solve::{svp_policy_evaluation, value_iteration, DEFAULT_TOLERANCE};

/// Slack on `>=` membership thresholds for exact solvers.
pub const MEMBERSHIP_SLACK: f64 = 1e-9;

/// Candidate set and backup target for one successor row.
///
/// Keeps `{a in allowed : Q(s', a) >= (1 - zeta) V*(s') - slack}` and returns
/// the minimum over it. An empty candidate set, or `V*(s') < 0`, switches to
/// the greedy maximum over `allowed` instead.
pub(crate) fn near_greedy_target(
    row: &[f64],
    allowed: ActionSet,
    v_star: f64,
    zeta: f64,
    slack: f64,
) -> (ActionSet, f64) {
    let best = allowed.max_over(row).unwrap_or(0.0);
    if v_star < 0.0 {
        return (ActionSet::EMPTY, best);
    }
    let threshold = (1.0 - zeta) * v_star - slack;
    let set: ActionSet = allowed.iter().filter(|&a| row[a] >= threshold).collect();
    match set.min_over(row) {
        Some(worst) => (set, worst),
        None => (ActionSet::EMPTY, best),
    }
}

/// Final membership for one state: the candidate set, or the greedy ties
/// among `allowed` when the candidate set is empty or `V*(s) < 0`.
pub(crate) fn near_greedy_set(row: &[f64], allowed: ActionSet, v_star: f64, zeta: f64, slack: f64) -> ActionSet {
    let (set, _) = near_greedy_target(row, allowed, v_star, zeta, slack);
    if !set.is_empty() {
        return set;
    }
    greedy_ties(row, allowed, slack)
}

pub(crate) fn greedy_ties(row: &[f64], allowed: ActionSet, slack: f64) -> ActionSet {
    let best = allowed.max_over(row).unwrap_or(f64::NEG_INFINITY);
    allowed.iter().filter(|&a| row[a] >= best - slack).collect()
}

/// Apply a per-state rule to non-terminal rows; terminals get the full set.
pub(crate) fn sets_from_rows(mdp: &TabularMdp, mut rule: impl FnMut(usize) -> ActionSet) -> Vec<ActionSet> {
    let full = ActionSet::full(mdp.action_count());
    (0..mdp.state_count()).map(|s| if mdp.is_terminal(s) { full } else { rule(s) }).collect()
}

/// Threshold a Q table row by row against `threshold(s)`, falling back to the
/// greedy ties of `q` when nothing qualifies.
pub(crate) fn threshold_sets(
    mdp: &TabularMdp,
    q: &QTable,
    threshold: impl Fn(usize) -> f64,
    slack: f64,
) -> Vec<ActionSet> {
    sets_from_rows(mdp, |s| {
        let set = threshold_set(q.row(s), threshold(s), slack);
        if set.is_empty() {
            argmax_set(q.row(s), slack)
        } else {
            set
        }
    })
}

pub(crate) fn check_zeta(zeta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&zeta) {
        Ok(())
    } else {
        Err(SvpError::InvalidConfig(format!("zeta {zeta} must lie in [0, 1]")))
    }
}

pub(crate) fn check_v_star(mdp: &TabularMdp, v_star: &[f64]) -> Result<()> {
    if v_star.len() != mdp.state_count() {
        return Err(SvpError::InvalidConfig(format!(
            "V* has {} entries for {} states",
            v_star.len(),
            mdp.state_count()
        )));
    }
    Ok(())
}

/// Algorithms that produce an SVP directly from a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Greedy singleton policy from `Q*`.
    ValueIteration,
    NearGreedyVi,
    NearGreedyDag,
    Conservative,
    QstarBased,
    Additive,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::ValueIteration,
        Algorithm::NearGreedyVi,
        Algorithm::NearGreedyDag,
        Algorithm::Conservative,
        Algorithm::QstarBased,
        Algorithm::Additive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::ValueIteration => "value-iteration",
            Algorithm::NearGreedyVi => "near-greedy-vi",
            Algorithm::NearGreedyDag => "near-greedy-dag",
            Algorithm::Conservative => "conservative",
            Algorithm::QstarBased => "qstar-based",
            Algorithm::Additive => "additive",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| SvpError::InvalidConfig(format!("unknown algorithm {name:?}")))
    }
}

/// Everything a consumer needs to display or audit a solved policy.
#[derive(Debug, Clone)]
pub struct Solved {
    pub policy: SetValuedPolicy,
    pub q_star: QTable,
    pub v_star: Vec<f64>,
    pub q_pi: QTable,
    pub trace: Option<ConvergenceTrace>,
}

/// Solve for `Q*`, build the SVP with `algorithm`, and evaluate it.
///
/// Near-greedy value iteration that never settles yields
/// [`SvpError::NoFixedPoint`] carrying the trace summary.
pub fn solve_policy(mdp: &TabularMdp, algorithm: Algorithm, zeta: f64) -> Result<Solved> {
    check_zeta(zeta)?;
    let (q_star, v_star) = value_iteration(mdp, DEFAULT_TOLERANCE)?;
    let v_star = v_star.into_inner();
    let mut trace = None;
    let mut policy = match algorithm {
        Algorithm::ValueIteration => SetValuedPolicy::greedy(mdp, &q_star),
        Algorithm::NearGreedyVi => {
            let (policy, t) = near_greedy_vi(mdp, &v_star, zeta, DEFAULT_MAX_SWEEPS, DEFAULT_WINDOW)?;
            let policy = policy.ok_or_else(|| SvpError::NoFixedPoint(t.summary()))?;
            trace = Some(t);
            policy
        }
        Algorithm::NearGreedyDag => near_greedy_construct_dag(mdp, &v_star, zeta)?,
        Algorithm::Conservative => conservative_svp(mdp, &v_star, zeta)?,
        Algorithm::QstarBased => qstar_based_svp(mdp, &q_star, zeta)?,
        Algorithm::Additive => additive_svp(mdp, &q_star, &v_star, zeta)?,
    };
    policy.zeta = zeta;
    policy.gamma = Some(mdp.gamma());
    policy.source = algorithm.name().to_string();
    let q_pi = svp_policy_evaluation(mdp, &policy, DEFAULT_TOLERANCE)?;
    policy.q = Some(q_pi.clone());
    policy.v_star = Some(v_star.clone());
    Ok(Solved { policy, q_star, v_star, q_pi, trace })
}
