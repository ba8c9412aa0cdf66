//! Exact solvers: optimal values, worst-case evaluation of set-valued
//! policies, and a rollout cross-check for deterministic MDPs.

use crate::error::{Result, SvpError};
use crate::mdp::{QTable, TabularMdp, ValueTable};
use crate::policy::SetValuedPolicy;

/// Default stopping tolerance for both iterative solvers.
pub const DEFAULT_TOLERANCE: f64 = 1e-10;

/// Sweep cap for the iterative solvers.
pub const MAX_SWEEPS: usize = 1_000_000;

/// Sweep-to-sweep change below which the iterate is within `tolerance` of the
/// fixed point, floored at a few ulps of the iterate's magnitude.
pub(crate) fn stop_threshold(tolerance: f64, gamma: f64, scale: f64) -> f64 {
    let contraction = if gamma < 1.0 && gamma > 0.0 { tolerance * (1.0 - gamma) / gamma } else { tolerance };
    contraction.max(8.0 * f64::EPSILON * scale.max(1.0))
}

fn check_tolerance(tolerance: f64) -> Result<()> {
    if tolerance > 0.0 && tolerance.is_finite() {
        Ok(())
    } else {
        Err(SvpError::InvalidConfig(format!("tolerance {tolerance} must be positive")))
    }
}

/// Synchronous value iteration. Returns `Q*` and `V*` with `V*(terminal) = 0`.
pub fn value_iteration(mdp: &TabularMdp, tolerance: f64) -> Result<(QTable, ValueTable)> {
    check_tolerance(tolerance)?;
    let mut q = QTable::for_mdp(mdp);
    let mut v = vec![0.0; mdp.state_count()];
    let mut delta = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        delta = 0.0;
        let mut next = q.clone();
        for s in (0..mdp.state_count()).filter(|&s| !mdp.is_terminal(s)) {
            for a in 0..mdp.action_count() {
                let value = mdp.backup(s, a, &v);
                delta = f64::max(delta, (value - q.get(s, a)).abs());
                next.set(s, a, value);
            }
        }
        q = next;
        v = q.greedy_values(mdp.terminal_mask()).into_inner();
        if delta <= stop_threshold(tolerance, mdp.gamma(), q.sup_norm()) {
            return Ok((q, ValueTable(v)));
        }
    }
    Err(SvpError::NotConverged { what: "value iteration", iterations: MAX_SWEEPS, delta })
}

/// Worst-case state values `min_{a in pi(s)} Q(s, a)`; zero at terminals.
pub fn worst_case_values(mdp: &TabularMdp, svp: &SetValuedPolicy, q: &QTable) -> ValueTable {
    ValueTable(
        (0..mdp.state_count())
            .map(|s| {
                if mdp.is_terminal(s) {
                    0.0
                } else {
                    svp.set(s).min_over(q.row(s)).expect("policy sets are non-empty")
                }
            })
            .collect(),
    )
}

/// One application of the worst-case evaluation operator
/// `(TQ)(s, a) = r(s, a) + gamma * E[min_{a' in pi(s')} Q(s', a')]`.
pub fn worst_case_operator(mdp: &TabularMdp, svp: &SetValuedPolicy, q: &QTable) -> QTable {
    let v = worst_case_values(mdp, svp, q);
    let mut out = QTable::for_mdp(mdp);
    for s in (0..mdp.state_count()).filter(|&s| !mdp.is_terminal(s)) {
        for a in 0..mdp.action_count() {
            out.set(s, a, mdp.backup(s, a, &v));
        }
    }
    out
}

/// Iterative policy evaluation for a set-valued policy, starting from `Q = 0`.
pub fn svp_policy_evaluation(mdp: &TabularMdp, svp: &SetValuedPolicy, tolerance: f64) -> Result<QTable> {
    check_tolerance(tolerance)?;
    svp.validate_for(mdp)?;
    let mut q = QTable::for_mdp(mdp);
    let mut delta = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        let next = worst_case_operator(mdp, svp, &q);
        delta = next.sup_distance(&q);
        q = next;
        if delta <= stop_threshold(tolerance, mdp.gamma(), q.sup_norm()) {
            return Ok(q);
        }
    }
    Err(SvpError::NotConverged { what: "set-valued policy evaluation", iterations: MAX_SWEEPS, delta })
}

/// `V^pi` for a set-valued policy.
pub fn evaluate_values(mdp: &TabularMdp, svp: &SetValuedPolicy, tolerance: f64) -> Result<ValueTable> {
    let q = svp_policy_evaluation(mdp, svp, tolerance)?;
    Ok(worst_case_values(mdp, svp, &q))
}

/// Discounted return of the rollout that always takes the lowest-`Q^pi`
/// action inside `pi(s)`. Only defined on deterministic MDPs.
pub fn monte_carlo_worst_case(mdp: &TabularMdp, svp: &SetValuedPolicy, state: usize, horizon: usize) -> Result<f64> {
    if let Some((s, a)) = mdp.first_stochastic() {
        return Err(SvpError::Stochastic { state: s, action: a });
    }
    if state >= mdp.state_count() {
        return Err(SvpError::InvalidConfig(format!("state {state} out of range")));
    }
    let q = svp_policy_evaluation(mdp, svp, DEFAULT_TOLERANCE)?;
    let mut total = 0.0;
    let mut discount = 1.0;
    let mut s = state;
    for _ in 0..horizon {
        if mdp.is_terminal(s) {
            break;
        }
        let row = q.row(s);
        let a = svp
            .set(s)
            .iter()
            .reduce(|best, a| if row[a] < row[best] { a } else { best })
            .expect("policy sets are non-empty");
        total += discount * mdp.reward(s, a);
        discount *= mdp.gamma();
        s = mdp.deterministic_next(s, a).expect("deterministic MDP");
    }
    Ok(total)
}
