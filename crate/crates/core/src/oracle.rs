//! Maximal-size zeta-optimal SVP by exhaustive search.
//!
//! For a fixed membership matrix the largest value vector satisfying the
//! big-M constraints is the worst-case fixed point, so feasibility reduces to
//! evaluating each candidate exactly. Candidates are scanned by decreasing
//! total size; the first size level with a feasible member decides the
//! answer, and ties inside it go to larger `mu^T V^pi`, then to the
//! lexicographically smallest membership bit vector.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, SvpError};
use crate::mdp::TabularMdp;
use crate::metrics::metrics_from_values;
use crate::policy::{threshold_set, ActionSet, SetValuedPolicy};
use crate::solve::{evaluate_values, DEFAULT_TOLERANCE};
use crate::svp::{
    check_v_star, check_zeta, fixed_point_violations, near_greedy_vi, DEFAULT_ENUMERATION_GUARD, DEFAULT_MAX_SWEEPS,
    DEFAULT_WINDOW, MEMBERSHIP_SLACK,
};

/// Relative tolerance under which two `mu^T V` objectives tie.
const OBJECTIVE_TIE: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct OracleResult {
    pub best_svp: SetValuedPolicy,
    /// Total membership count over non-terminal states.
    pub total_size: usize,
    /// `mu^T V^pi` of the best candidate.
    pub mu_value: f64,
    pub feasible_count: usize,
    /// Candidates after dropping actions with `Q*(s,a) < (1 - zeta) V*(s)`.
    pub search_space_size: f64,
    /// Candidates before that pruning.
    pub unpruned_space_size: f64,
    pub evaluated: usize,
}

/// Non-empty subsets of `allowed`, grouped by size.
fn subsets_by_size(allowed: ActionSet) -> Vec<Vec<ActionSet>> {
    let mut by_size = vec![Vec::new(); allowed.len() + 1];
    let bits = allowed.bits();
    let mut sub = bits;
    while sub != 0 {
        let set = ActionSet::from_bits(sub);
        by_size[set.len()].push(set);
        sub = (sub - 1) & bits;
    }
    for group in &mut by_size {
        group.sort();
    }
    by_size
}

/// All assignments whose sizes sum to exactly `total`.
fn level_candidates(options: &[Vec<Vec<ActionSet>>], total: usize) -> Vec<Vec<ActionSet>> {
    fn rec(
        options: &[Vec<Vec<ActionSet>>],
        max_rest: &[usize],
        i: usize,
        remaining: usize,
        current: &mut Vec<ActionSet>,
        out: &mut Vec<Vec<ActionSet>>,
    ) {
        if i == options.len() {
            if remaining == 0 {
                out.push(current.clone());
            }
            return;
        }
        let rest_min = options.len() - i - 1;
        for size in 1..options[i].len() {
            if size > remaining || remaining - size < rest_min || remaining - size > max_rest[i + 1] {
                continue;
            }
            for &set in &options[i][size] {
                current.push(set);
                rec(options, max_rest, i + 1, remaining - size, current, out);
                current.pop();
            }
        }
    }
    let mut max_rest = vec![0; options.len() + 1];
    for i in (0..options.len()).rev() {
        max_rest[i] = max_rest[i + 1] + options[i].len() - 1;
    }
    let mut out = Vec::new();
    rec(options, &max_rest, 0, total, &mut Vec::new(), &mut out);
    out
}

pub fn exhaustive_maximal_svp(mdp: &TabularMdp, v_star: &[f64], zeta: f64, guard: f64) -> Result<OracleResult> {
    check_zeta(zeta)?;
    check_v_star(mdp, v_star)?;
    let m = mdp.action_count();
    let decision: Vec<usize> = (0..mdp.state_count()).filter(|&s| !mdp.is_terminal(s)).collect();
    let options: Vec<Vec<Vec<ActionSet>>> = decision
        .iter()
        .map(|&s| {
            let q: Vec<f64> = (0..m).map(|a| mdp.backup(s, a, v_star)).collect();
            subsets_by_size(threshold_set(&q, (1.0 - zeta) * v_star[s], MEMBERSHIP_SLACK))
        })
        .collect();
    let search_space_size: f64 =
        options.iter().map(|by_size| by_size.iter().map(Vec::len).sum::<usize>() as f64).product();
    let unpruned_space_size = (((1u64 << m) - 1) as f64).powi(decision.len() as i32);
    if search_space_size > guard {
        return Err(SvpError::GuardExceeded { size: search_space_size, guard });
    }
    if options.iter().any(|by_size| by_size.len() <= 1) {
        return Err(SvpError::Internal("a state has no action meeting its threshold".into()));
    }

    let full = ActionSet::full(m);
    let max_total: usize = options.iter().map(|o| o.len() - 1).sum();
    let mut evaluated = 0;
    for total in (decision.len()..=max_total).rev() {
        let level = level_candidates(&options, total);
        evaluated += level.len();
        let feasible: Vec<(Vec<ActionSet>, f64)> = level
            .into_par_iter()
            .map(|choice| {
                let mut sets = vec![full; mdp.state_count()];
                for (&s, set) in decision.iter().zip(choice) {
                    sets[s] = set;
                }
                let policy = SetValuedPolicy::new(sets, m, zeta, "oracle")?;
                let v = evaluate_values(mdp, &policy, DEFAULT_TOLERANCE)?;
                let ok = decision.iter().all(|&s| v[s] >= (1.0 - zeta) * v_star[s] - MEMBERSHIP_SLACK);
                let mu_value: f64 = mdp.start_distribution().iter().zip(v.iter()).map(|(p, x)| p * x).sum();
                Ok(ok.then(|| (policy.sets().to_vec(), mu_value)))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        if feasible.is_empty() {
            continue;
        }
        let best_value = feasible.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        let cutoff = best_value - OBJECTIVE_TIE * best_value.abs().max(1.0);
        let (sets, mu_value) = feasible
            .iter()
            .filter(|(_, v)| *v >= cutoff)
            .min_by(|a, b| a.0.cmp(&b.0))
            .cloned()
            .expect("non-empty feasible level");
        let mut best_svp = SetValuedPolicy::new(sets, m, zeta, "oracle")?;
        best_svp.gamma = Some(mdp.gamma());
        best_svp.v_star = Some(v_star.to_vec());
        return Ok(OracleResult {
            best_svp,
            total_size: total,
            mu_value,
            feasible_count: feasible.len(),
            search_space_size,
            unpruned_space_size,
            evaluated,
        });
    }
    Err(SvpError::Internal("no feasible candidate; the greedy policy should always qualify".into()))
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleComparison {
    pub zeta: f64,
    pub near_greedy_converged: bool,
    pub near_greedy_summary: String,
    pub near_greedy_size: Option<usize>,
    pub oracle_size: usize,
    pub near_greedy_average: Option<f64>,
    pub oracle_average: f64,
    pub near_greedy_ratio: Option<f64>,
    pub oracle_ratio: Option<f64>,
    /// Near-greedy SVP meets `V^pi >= (1 - zeta) V*` everywhere.
    pub near_greedy_feasible: Option<bool>,
    /// Near-greedy SVP passes the two-way fixed-point membership test.
    pub near_greedy_fixed_point: Option<bool>,
    pub identical: bool,
    pub oracle: OracleResult,
}

/// Run near-greedy value iteration and the oracle side by side.
pub fn oracle_compare(mdp: &TabularMdp, v_star: &[f64], zeta: f64) -> Result<OracleComparison> {
    oracle_compare_guarded(mdp, v_star, zeta, DEFAULT_ENUMERATION_GUARD)
}

pub fn oracle_compare_guarded(mdp: &TabularMdp, v_star: &[f64], zeta: f64, guard: f64) -> Result<OracleComparison> {
    let oracle = exhaustive_maximal_svp(mdp, v_star, zeta, guard)?;
    let oracle_v = evaluate_values(mdp, &oracle.best_svp, DEFAULT_TOLERANCE)?;
    let oracle_metrics = metrics_from_values(mdp, &oracle.best_svp, &oracle_v, v_star);
    let (near, trace) = near_greedy_vi(mdp, v_star, zeta, DEFAULT_MAX_SWEEPS, DEFAULT_WINDOW)?;
    let terminal = mdp.terminal_mask();
    let mut out = OracleComparison {
        zeta,
        near_greedy_converged: trace.converged,
        near_greedy_summary: trace.summary(),
        near_greedy_size: None,
        oracle_size: oracle.total_size,
        near_greedy_average: None,
        oracle_average: oracle_metrics.average_policy_size_nonterminal,
        near_greedy_ratio: None,
        oracle_ratio: oracle_metrics.worst_case_ratio,
        near_greedy_feasible: None,
        near_greedy_fixed_point: None,
        identical: false,
        oracle,
    };
    if let Some(near) = near {
        let v = evaluate_values(mdp, &near, DEFAULT_TOLERANCE)?;
        let metrics = metrics_from_values(mdp, &near, &v, v_star);
        out.near_greedy_size = Some(near.decision_size(terminal));
        out.near_greedy_average = Some(metrics.average_policy_size_nonterminal);
        out.near_greedy_ratio = metrics.worst_case_ratio;
        out.near_greedy_feasible = Some(
            (0..mdp.state_count())
                .filter(|&s| !mdp.is_terminal(s))
                .all(|s| v[s] >= (1.0 - zeta) * v_star[s] - MEMBERSHIP_SLACK),
        );
        out.near_greedy_fixed_point = Some(fixed_point_violations(mdp, &near, v_star, zeta)?.is_empty());
        out.identical = near.same_sets(&out.oracle.best_svp);
    }
    Ok(out)
}
