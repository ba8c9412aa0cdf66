//! Closed-form SVP constructions from `Q*` / `V*`.

use super::{
    check_v_star, check_zeta, near_greedy_set, near_greedy_target, sets_from_rows, threshold_sets, MEMBERSHIP_SLACK,
};
use crate::dag::dag_decompose;
use crate::error::{Result, SvpError};
use crate::mdp::{QTable, TabularMdp};
use crate::policy::{argmax_set, threshold_set, ActionSet, SetValuedPolicy};

fn finish(mdp: &TabularMdp, sets: Vec<ActionSet>, zeta: f64, source: &str) -> Result<SetValuedPolicy> {
    let mut policy = SetValuedPolicy::new(sets, mdp.action_count(), zeta, source)?;
    policy.gamma = Some(mdp.gamma());
    Ok(policy)
}

/// Keep `a` when `r(s,a) + gamma (1 - zeta) E[V*(s')] >= (1 - zeta) V*(s)`.
///
/// Every future state is pessimistically credited with only `(1 - zeta) V*`,
/// so the guarantee holds without any fixed-point reasoning.
pub fn conservative_svp(mdp: &TabularMdp, v_star: &[f64], zeta: f64) -> Result<SetValuedPolicy> {
    check_zeta(zeta)?;
    check_v_star(mdp, v_star)?;
    if let Some(state) = (0..mdp.state_count()).find(|&s| v_star[s] < 0.0) {
        return Err(SvpError::NegativeValue { state, value: v_star[state] });
    }
    let m = mdp.action_count();
    let sets = sets_from_rows(mdp, |s| {
        let lower: Vec<f64> = (0..m).map(|a| mdp.backup_scaled(s, a, v_star, 1.0 - zeta)).collect();
        let set = threshold_set(&lower, (1.0 - zeta) * v_star[s], MEMBERSHIP_SLACK);
        if set.is_empty() {
            let q: Vec<f64> = (0..m).map(|a| mdp.backup(s, a, v_star)).collect();
            argmax_set(&q, MEMBERSHIP_SLACK)
        } else {
            set
        }
    });
    let mut policy = finish(mdp, sets, zeta, "conservative")?;
    policy.v_star = Some(v_star.to_vec());
    Ok(policy)
}

/// The unique near-greedy fixed point on a DAG, built state by state in
/// reverse topological order so every successor's worst-case value is final
/// before it is used.
pub fn near_greedy_construct_dag(mdp: &TabularMdp, v_star: &[f64], zeta: f64) -> Result<SetValuedPolicy> {
    check_zeta(zeta)?;
    check_v_star(mdp, v_star)?;
    let dag = dag_decompose(mdp);
    if !dag.is_dag {
        return Err(SvpError::NotDag("the constructive near-greedy solution needs an acyclic MDP".into()));
    }
    for s in (0..mdp.state_count()).filter(|&s| !mdp.is_terminal(s)) {
        for a in 0..mdp.action_count() {
            let reward = mdp.reward(s, a);
            if reward < 0.0 {
                return Err(SvpError::NegativeReward { state: s, action: a, reward });
            }
        }
    }
    let full = ActionSet::full(mdp.action_count());
    let mut q = QTable::for_mdp(mdp);
    let mut target = vec![0.0; mdp.state_count()];
    for &s in dag.topological_order.iter().rev() {
        if mdp.is_terminal(s) {
            continue;
        }
        for a in 0..mdp.action_count() {
            q.set(s, a, mdp.backup(s, a, &target));
        }
        target[s] = near_greedy_target(q.row(s), full, v_star[s], zeta, MEMBERSHIP_SLACK).1;
    }
    let sets = sets_from_rows(mdp, |s| near_greedy_set(q.row(s), full, v_star[s], zeta, MEMBERSHIP_SLACK));
    let mut policy = finish(mdp, sets, zeta, "near-greedy-dag")?;
    policy.q = Some(q);
    policy.v_star = Some(v_star.to_vec());
    Ok(policy)
}

/// Threshold `Q*` directly: `{a : Q*(s,a) >= (1 - zeta) V*(s)}`.
///
/// Carries no guarantee, since the future is assumed to follow `pi*` rather
/// than the set itself.
pub fn qstar_based_svp(mdp: &TabularMdp, q_star: &QTable, zeta: f64) -> Result<SetValuedPolicy> {
    check_zeta(zeta)?;
    let sets = threshold_sets(mdp, q_star, |s| (1.0 - zeta) * q_star.max(s), MEMBERSHIP_SLACK);
    let mut policy = finish(mdp, sets, zeta, "qstar-based")?;
    policy.q = Some(q_star.clone());
    Ok(policy)
}

/// `epsilon = zeta (1 - gamma) ||V*||_inf`.
pub fn additive_epsilon(gamma: f64, v_star: &[f64], zeta: f64) -> f64 {
    let norm = v_star.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    zeta * (1.0 - gamma) * norm
}

/// Keep `a` when `Q*(s,a) >= V*(s) - epsilon`; then
/// `V*(s) - V^pi(s) <= epsilon / (1 - gamma) = zeta ||V*||_inf`.
pub fn additive_svp(mdp: &TabularMdp, q_star: &QTable, v_star: &[f64], zeta: f64) -> Result<SetValuedPolicy> {
    check_zeta(zeta)?;
    check_v_star(mdp, v_star)?;
    if mdp.gamma() >= 1.0 {
        return Err(SvpError::InvalidConfig("the additive construction needs gamma < 1".into()));
    }
    let epsilon = additive_epsilon(mdp.gamma(), v_star, zeta);
    let sets = threshold_sets(mdp, q_star, |s| v_star[s] - epsilon, MEMBERSHIP_SLACK);
    let mut policy = finish(mdp, sets, zeta, "additive")?;
    policy.q = Some(q_star.clone());
    policy.v_star = Some(v_star.to_vec());
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env;
    use crate::solve::{evaluate_values, value_iteration, DEFAULT_TOLERANCE};

    const CHAIN2: [f64; 4] = [0.0, 0.01, 0.04, 0.05];

    fn chain2() -> TabularMdp {
        env::build_chain_from_rewards(&[CHAIN2.to_vec()], 0.9).unwrap()
    }

    fn actions_with_rewards(policy: &SetValuedPolicy, s: usize) -> Vec<f64> {
        policy.set(s).iter().map(|a| CHAIN2[a]).collect()
    }

    #[test]
    fn chain2_conservative_hand_value() {
        // Terminal successor: Q-check = r + 1, threshold 0.98 * 1.05 = 1.029.
        let mdp = chain2();
        let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        let p = conservative_svp(&mdp, &v, 0.02).unwrap();
        assert_eq!(actions_with_rewards(&p, 0), vec![0.04, 0.05]);
    }

    #[test]
    fn chain2_additive_hand_value() {
        // epsilon = 0.02 * 0.1 * 1.05 = 0.0021, threshold 1.0479.
        let mdp = chain2();
        let (q, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        assert!((additive_epsilon(0.9, &v, 0.02) - 0.0021).abs() < 1e-12);
        let p = additive_svp(&mdp, &q, &v, 0.02).unwrap();
        assert_eq!(actions_with_rewards(&p, 0), vec![0.05]);
    }

    #[test]
    fn appendix_c_qstar_based_includes_left() {
        let mdp = env::build_appendix_c_mdp();
        let (q, _) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        let p = qstar_based_svp(&mdp, &q, 0.2).unwrap();
        assert!(p.contains(1, env::APPENDIX_C_LEFT));
    }

    #[test]
    fn construct_rejects_cycles_and_negative_rewards() {
        let cyclic = env::build_cyclic_chain(4, 0, 0.9).unwrap();
        let (_, v) = value_iteration(&cyclic, DEFAULT_TOLERANCE).unwrap();
        assert!(matches!(near_greedy_construct_dag(&cyclic, &v, 0.1), Err(SvpError::NotDag(_))));

        let negative = env::build_chain_from_rewards(&[vec![-0.5, 0.0], vec![0.0, 0.0]], 0.9).unwrap();
        let (_, v) = value_iteration(&negative, DEFAULT_TOLERANCE).unwrap();
        assert!(matches!(
            near_greedy_construct_dag(&negative, &v, 0.1),
            Err(SvpError::NegativeReward { state: 0, action: 0, .. })
        ));
    }

    #[test]
    fn conservative_rejects_negative_values() {
        let mut b = crate::mdp::MdpBuilder::new(2, 1, 0.9);
        b.transition(0, 0, &[(1, 1.0)]).reward(0, 0, -1.0).terminal(1);
        let mdp = b.build().unwrap();
        let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        assert!(matches!(conservative_svp(&mdp, &v, 0.1), Err(SvpError::NegativeValue { state: 0, .. })));
    }

    #[test]
    fn chain5_zeta_one_takes_everything() {
        let mdp = env::build_chain(5, 0, 0.9).unwrap();
        let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        let p = near_greedy_construct_dag(&mdp, &v, 1.0).unwrap();
        assert!(p.sets().iter().all(|s| s.len() == 4));
    }

    #[test]
    fn uniform_chain_keeps_full_sets() {
        let mdp = env::build_chain_from_rewards(&vec![vec![0.02; 4]; 4], 0.9).unwrap();
        let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        for zeta in [0.0, 0.1, 0.5] {
            let p = near_greedy_construct_dag(&mdp, &v, zeta).unwrap();
            assert!(p.sets().iter().all(|s| s.len() == 4), "zeta {zeta}");
        }
    }

    #[test]
    fn zeta_zero_is_greedy_and_optimal() {
        let mdp = env::build_chain(5, 7, 0.9).unwrap();
        let (q, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        let greedy = SetValuedPolicy::greedy(&mdp, &q);
        for p in [
            near_greedy_construct_dag(&mdp, &v, 0.0).unwrap(),
            conservative_svp(&mdp, &v, 0.0).unwrap(),
            qstar_based_svp(&mdp, &q, 0.0).unwrap(),
            additive_svp(&mdp, &q, &v, 0.0).unwrap(),
        ] {
            assert!(p.same_sets(&greedy), "{}", p.source);
            let v_pi = evaluate_values(&mdp, &p, DEFAULT_TOLERANCE).unwrap();
            for s in 0..5 {
                assert!((v_pi[s] - v[s]).abs() < 1e-9);
            }
        }
    }
}
