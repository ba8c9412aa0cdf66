//! Policy-size and worst-case near-optimality metrics.

use serde::Serialize;

use crate::error::Result;
use crate::mdp::TabularMdp;
use crate::policy::SetValuedPolicy;
use crate::solve::{evaluate_values, DEFAULT_TOLERANCE};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SvpMetrics {
    /// Mean `|pi(s)|` over all states, terminals counted with full sets.
    pub average_policy_size: f64,
    /// Mean `|pi(s)|` over non-terminal states only.
    pub average_policy_size_nonterminal: f64,
    /// `min V^pi(s) / V*(s)` over non-terminal states with `V*(s) > 0`.
    pub worst_case_ratio: Option<f64>,
    pub worst_case_deviation: Option<f64>,
    /// Terminals read 1; states with `V*(s) <= 0` have no ratio.
    pub per_state_ratio: Vec<Option<f64>>,
    pub v_pi: Vec<f64>,
}

pub fn compute_metrics(mdp: &TabularMdp, svp: &SetValuedPolicy, v_star: &[f64]) -> Result<SvpMetrics> {
    let v_pi = evaluate_values(mdp, svp, DEFAULT_TOLERANCE)?.into_inner();
    Ok(metrics_from_values(mdp, svp, &v_pi, v_star))
}

/// Metrics from already evaluated worst-case values.
pub fn metrics_from_values(mdp: &TabularMdp, svp: &SetValuedPolicy, v_pi: &[f64], v_star: &[f64]) -> SvpMetrics {
    let n = mdp.state_count();
    let total: usize = svp.sets().iter().map(|s| s.len()).sum();
    let decision = n - mdp.terminal_states().len();
    let per_state_ratio: Vec<Option<f64>> = (0..n)
        .map(|s| {
            if mdp.is_terminal(s) {
                Some(1.0)
            } else if v_star[s] > 0.0 {
                Some(v_pi[s] / v_star[s])
            } else {
                None
            }
        })
        .collect();
    let worst_case_ratio = (0..n).filter(|&s| !mdp.is_terminal(s)).filter_map(|s| per_state_ratio[s]).reduce(f64::min);
    SvpMetrics {
        average_policy_size: total as f64 / n as f64,
        average_policy_size_nonterminal: if decision == 0 {
            0.0
        } else {
            svp.decision_size(mdp.terminal_mask()) as f64 / decision as f64
        },
        worst_case_ratio,
        worst_case_deviation: worst_case_ratio.map(|r| 1.0 - r),
        per_state_ratio,
        v_pi: v_pi.to_vec(),
    }
}
