//! Brute-force checks: two-way fixed-point membership, exhaustive search for
//! near-greedy fixed points, and worst-case control over the power set of
//! actions.

use rayon::prelude::*;
use serde::Serialize;

use super::{check_v_star, check_zeta, MEMBERSHIP_SLACK};
use crate::error::{Result, SvpError};
use crate::mdp::TabularMdp;
use crate::policy::{ActionSet, SetValuedPolicy};
use crate::solve::{stop_threshold, svp_policy_evaluation, value_iteration, DEFAULT_TOLERANCE, MAX_SWEEPS};

/// Largest candidate count any enumeration accepts by default.
pub const DEFAULT_ENUMERATION_GUARD: f64 = 2e6;

/// Per-candidate outcomes are kept only for searches up to this size.
const OUTCOME_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// `a` is in `pi(s)` but `Q^pi(s,a) < (1 - zeta) V*(s)`.
    IncludedBelowThreshold,
    /// `a` is outside `pi(s)` yet `Q^pi(s,a) >= (1 - zeta) V*(s)`.
    ExcludedAboveThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub state: usize,
    pub action: usize,
    pub kind: ViolationKind,
    pub q: f64,
    pub threshold: f64,
}

/// Two-way membership test of the near-greedy fixed-point equation.
///
/// States with `V*(s) < 0` are skipped, since the greedy fallback governs them.
pub fn fixed_point_violations(
    mdp: &TabularMdp,
    svp: &SetValuedPolicy,
    v_star: &[f64],
    zeta: f64,
) -> Result<Vec<Violation>> {
    check_zeta(zeta)?;
    check_v_star(mdp, v_star)?;
    let q = svp_policy_evaluation(mdp, svp, DEFAULT_TOLERANCE)?;
    let mut out = Vec::new();
    for s in (0..mdp.state_count()).filter(|&s| !mdp.is_terminal(s) && v_star[s] >= 0.0) {
        let threshold = (1.0 - zeta) * v_star[s];
        for a in 0..mdp.action_count() {
            let value = q.get(s, a);
            let qualifies = value >= threshold - MEMBERSHIP_SLACK;
            let kind = match (svp.contains(s, a), qualifies) {
                (true, false) => ViolationKind::IncludedBelowThreshold,
                (false, true) => ViolationKind::ExcludedAboveThreshold,
                _ => continue,
            };
            out.push(Violation { state: s, action: a, kind, q: value, threshold });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateOutcome {
    pub sets: Vec<Vec<usize>>,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NonexistenceReport {
    pub search_space: usize,
    /// Every candidate's outcome, or empty for searches above 10 000 candidates.
    pub candidates: Vec<CandidateOutcome>,
    pub fixed_points: Vec<SetValuedPolicy>,
}

fn candidate_sets(mdp: &TabularMdp, decision: &[usize], index: usize) -> Vec<ActionSet> {
    let full = ActionSet::full(mdp.action_count());
    let radix = (1usize << mdp.action_count()) - 1;
    let mut sets = vec![full; mdp.state_count()];
    let mut rest = index;
    for &s in decision {
        sets[s] = ActionSet::from_bits((rest % radix + 1) as u64);
        rest /= radix;
    }
    sets
}

/// Enumerate every SVP and keep the exact near-greedy fixed points.
pub fn nonexistence_check(mdp: &TabularMdp, v_star: &[f64], zeta: f64) -> Result<NonexistenceReport> {
    nonexistence_check_guarded(mdp, v_star, zeta, DEFAULT_ENUMERATION_GUARD)
}

pub fn nonexistence_check_guarded(
    mdp: &TabularMdp,
    v_star: &[f64],
    zeta: f64,
    guard: f64,
) -> Result<NonexistenceReport> {
    check_zeta(zeta)?;
    check_v_star(mdp, v_star)?;
    let decision: Vec<usize> = (0..mdp.state_count()).filter(|&s| !mdp.is_terminal(s)).collect();
    let radix = ((1u64 << mdp.action_count()) - 1) as f64;
    let size = radix.powi(decision.len() as i32);
    if size > guard {
        return Err(SvpError::GuardExceeded { size, guard });
    }
    let size = size as usize;
    let outcomes: Vec<(Vec<ActionSet>, Vec<Violation>)> = (0..size)
        .into_par_iter()
        .map(|i| {
            let sets = candidate_sets(mdp, &decision, i);
            let policy = SetValuedPolicy::new(sets.clone(), mdp.action_count(), zeta, "candidate")?;
            Ok((sets, fixed_point_violations(mdp, &policy, v_star, zeta)?))
        })
        .collect::<Result<_>>()?;
    let mut fixed_points = Vec::new();
    for (sets, violations) in &outcomes {
        if violations.is_empty() {
            let mut p = SetValuedPolicy::new(sets.clone(), mdp.action_count(), zeta, "fixed-point")?;
            p.gamma = Some(mdp.gamma());
            fixed_points.push(p);
        }
    }
    let candidates = if size <= OUTCOME_LIMIT {
        outcomes
            .into_iter()
            .map(|(sets, violations)| CandidateOutcome { sets: sets.iter().map(|s| s.to_vec()).collect(), violations })
            .collect()
    } else {
        Vec::new()
    };
    Ok(NonexistenceReport { search_space: size, candidates, fixed_points })
}

/// Largest action count the power-set solver accepts.
pub const MAX_EXTENDED_ACTIONS: usize = 12;

#[derive(Debug, Clone, Serialize)]
pub struct ExtendedSpaceReport {
    pub extended_values: Vec<f64>,
    pub optimal_values: Vec<f64>,
    pub max_abs_difference: f64,
    /// Per state: some singleton attains the extended maximum within tolerance.
    pub singleton_attains: Vec<bool>,
    pub values_match: bool,
    pub trivial: bool,
}

/// Worst-case value iteration where the agent picks a non-empty subset of
/// actions and the adversary picks the action inside it.
pub fn exponential_action_space_check(mdp: &TabularMdp, tolerance: f64) -> Result<ExtendedSpaceReport> {
    if mdp.action_count() > MAX_EXTENDED_ACTIONS {
        return Err(SvpError::GuardExceeded {
            size: ((1u64 << mdp.action_count()) - 1) as f64,
            guard: ((1u64 << MAX_EXTENDED_ACTIONS) - 1) as f64,
        });
    }
    let subsets: Vec<ActionSet> = (1..1u64 << mdp.action_count()).map(ActionSet::from_bits).collect();
    let n = mdp.state_count();
    let m = mdp.action_count();
    let best_subset_value = |q: &[f64]| {
        subsets.iter().map(|set| set.min_over(q).expect("non-empty subset")).fold(f64::NEG_INFINITY, f64::max)
    };
    let mut v = vec![0.0; n];
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut next = vec![0.0; n];
        for s in (0..n).filter(|&s| !mdp.is_terminal(s)) {
            let q: Vec<f64> = (0..m).map(|a| mdp.backup(s, a, &v)).collect();
            next[s] = best_subset_value(&q);
        }
        let delta = next.iter().zip(&v).fold(0.0f64, |d, (a, b)| d.max((a - b).abs()));
        let scale = next.iter().fold(0.0f64, |d, x| d.max(x.abs()));
        v = next;
        if delta <= stop_threshold(DEFAULT_TOLERANCE, mdp.gamma(), scale) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SvpError::NotConverged {
            what: "extended-space value iteration",
            iterations: MAX_SWEEPS,
            delta: f64::NAN,
        });
    }
    let (_, v_star) = value_iteration(mdp, DEFAULT_TOLERANCE)?;
    let singleton_attains: Vec<bool> = (0..n)
        .map(|s| {
            if mdp.is_terminal(s) {
                return true;
            }
            let q: Vec<f64> = (0..m).map(|a| mdp.backup(s, a, &v)).collect();
            let best = best_subset_value(&q);
            q.iter().any(|&x| x >= best - tolerance)
        })
        .collect();
    let max_abs_difference = v.iter().zip(v_star.iter()).fold(0.0f64, |d, (a, b)| d.max((a - b).abs()));
    let values_match = max_abs_difference <= tolerance;
    Ok(ExtendedSpaceReport {
        trivial: values_match && singleton_attains.iter().all(|&b| b),
        extended_values: v,
        optimal_values: v_star.into_inner(),
        max_abs_difference,
        singleton_attains,
        values_match,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env;
    use crate::svp::near_greedy_construct_dag;

    #[test]
    fn appendix_c_has_no_fixed_point() {
        let mdp = env::build_appendix_c_mdp();
        let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        let report = nonexistence_check(&mdp, &v, 0.2).unwrap();
        assert_eq!(report.search_space, 9);
        assert!(report.fixed_points.is_empty());
        let zero = nonexistence_check(&mdp, &v, 0.0).unwrap();
        assert_eq!(zero.fixed_points.len(), 1);
    }

    #[test]
    fn chain2_unique_fixed_point_matches_construction() {
        let mdp = env::build_chain_from_rewards(&[vec![0.0, 0.01, 0.04, 0.05]], 0.9).unwrap();
        let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        for zeta in [0.0, 0.02, 0.04, 0.3, 1.0] {
            let report = nonexistence_check(&mdp, &v, zeta).unwrap();
            assert_eq!(report.fixed_points.len(), 1, "zeta {zeta}");
            let built = near_greedy_construct_dag(&mdp, &v, zeta).unwrap();
            assert!(report.fixed_points[0].same_sets(&built));
        }
    }

    #[test]
    fn guard_is_enforced() {
        let mdp = env::build_chain(5, 0, 0.9).unwrap();
        let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        assert!(matches!(nonexistence_check_guarded(&mdp, &v, 0.1, 1000.0), Err(SvpError::GuardExceeded { .. })));
    }

    #[test]
    fn extended_space_is_trivial_on_fixtures() {
        let chain2 = env::build_chain_from_rewards(&[vec![0.0, 0.01, 0.04, 0.05]], 0.9).unwrap();
        let report = exponential_action_space_check(&chain2, 1e-9).unwrap();
        assert!((report.extended_values[0] - 1.05).abs() < 1e-9);
        assert!(report.trivial);

        let c = exponential_action_space_check(&env::build_appendix_c_mdp(), 1e-9).unwrap();
        assert!((c.extended_values[0] - 0.9).abs() < 1e-9);
        assert!((c.extended_values[1] - 1.0).abs() < 1e-9);
        assert!(c.trivial);
    }
}
