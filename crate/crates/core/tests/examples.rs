use svp_core::env::{build_chain, build_cyclic_chain, build_frozen_lake_with, EnvSpec};
use svp_core::experiments::{emit_report, render_report, run_convergence_grid, GridBudget, ReportFormat};
use svp_core::learn::{near_greedy_td, q_based_td, LearnConfig};
use svp_core::metrics::compute_metrics;
use svp_core::oracle::oracle_compare;
use svp_core::solve::{monte_carlo_worst_case, value_iteration, DEFAULT_TOLERANCE};
use svp_core::svp::{near_greedy_construct_dag, near_greedy_vi, DEFAULT_MAX_SWEEPS, DEFAULT_WINDOW};
use svp_core::{SetValuedPolicy, TabularMdp};

/// Lowest return over every action sequence from `s` on a deterministic DAG.
fn worst_path(mdp: &TabularMdp, svp: &SetValuedPolicy, s: usize) -> f64 {
    if mdp.is_terminal(s) {
        return 0.0;
    }
    svp.set(s)
        .iter()
        .map(|a| mdp.reward(s, a) + mdp.gamma() * worst_path(mdp, svp, mdp.deterministic_next(s, a).unwrap()))
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn unperturbed_lake_policy_reaches_the_goal() {
    for map in ["4x4", "8x8"] {
        let mdp = build_frozen_lake_with(map, 0.9, [0.0; 4]).unwrap();
        let (q, _) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        let goal = mdp.state_count() - 1;
        let mut s = 0;
        for _ in 0..mdp.state_count() {
            if mdp.is_terminal(s) {
                break;
            }
            s = mdp.deterministic_next(s, q.argmax(s)).unwrap();
        }
        assert_eq!(s, goal, "{map}");
    }
}

#[test]
fn cyclic_chain_pays_the_bonus_on_the_way_out() {
    let mdp = build_cyclic_chain(5, 4, 0.9).unwrap();
    let right: Vec<usize> = (0..4).filter(|&a| mdp.deterministic_next(3, a) == Some(4)).collect();
    assert_eq!(right.len(), 2);
    for a in right {
        assert!(mdp.reward(3, a) >= 1.0 && mdp.reward(3, a) <= 1.05);
    }
}

#[test]
fn full_sets_on_chain5_match_the_worst_path() {
    let mdp = build_chain(5, 0, 0.9).unwrap();
    let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
    let all = SetValuedPolicy::full(&mdp, "all");
    let metrics = compute_metrics(&mdp, &all, &v.0).unwrap();
    let brute = (0..4).map(|s| worst_path(&mdp, &all, s) / v.0[s]).fold(f64::INFINITY, f64::min);
    assert!((metrics.worst_case_ratio.unwrap() - brute).abs() < 1e-9);
    assert_eq!(metrics.average_policy_size, 4.0);
    for s in 0..5 {
        let rollout = monte_carlo_worst_case(&mdp, &all, s, 50).unwrap();
        assert!((rollout - metrics.v_pi[s]).abs() < 1e-9);
    }
}

#[test]
fn q_based_sets_are_at_least_as_large() {
    let mdp = build_chain(5, 0, 0.9).unwrap();
    let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
    let size = |p: &SetValuedPolicy| (0..4).map(|s| p.set(s).len()).sum::<usize>();
    for zeta in [0.01, 0.03, 0.05] {
        let config = LearnConfig::new(zeta, 100_000, 1);
        let q_based = q_based_td(&mdp, &config).unwrap();
        let near = near_greedy_td(&mdp, &v.0, &config).unwrap();
        assert!(size(&q_based.policy) >= size(&near.policy), "zeta {zeta}");
    }
}

#[test]
fn chain_grid_always_converges() {
    let spec = EnvSpec::chain(5, 0, 0.9);
    let grid = run_convergence_grid(&spec, &[0.5, 0.9, 0.99], &[0.01, 0.1, 0.5, 1.0], GridBudget::default()).unwrap();
    assert_eq!(grid.cells.len(), 12);
    assert!(grid.cells.iter().all(|c| c.converged));
    assert!(grid.cells.iter().any(|c| c.avg_size_nonterminal.unwrap() > 1.0));
    for (i, &gamma) in grid.gammas.iter().enumerate() {
        let mdp = spec.with_gamma(gamma).build().unwrap();
        let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        for (j, &zeta) in grid.zetas.iter().enumerate() {
            let built = near_greedy_construct_dag(&mdp, &v.0, zeta).unwrap();
            let avg = built.sets().iter().map(|s| s.len()).sum::<usize>() as f64 / 5.0;
            assert_eq!(grid.cell(i, j).avg_size, Some(avg));
        }
    }
}

#[test]
fn reports_render_deterministically() {
    let spec = EnvSpec::cyclic_chain(5, 0, 0.9);
    let grid = run_convergence_grid(&spec, &[0.5, 0.9], &[0.05, 0.2], GridBudget::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    emit_report(&grid, &a, ReportFormat::Csv).unwrap();
    emit_report(&grid, &b, ReportFormat::Csv).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert_eq!(text.lines().next().unwrap(), "gamma,zeta,converged,avg_size,avg_size_nonterminal");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let json: serde_json::Value = serde_json::from_str(&render_report(&grid, ReportFormat::Json).unwrap()).unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), 4);
    assert!(ReportFormat::parse("xml").is_err());
    assert!(emit_report(&grid, &dir.path().join("missing/x.csv"), ReportFormat::Csv).is_err());
}

#[test]
fn cyclic_chain_oracle_matches_near_greedy() {
    for seed in 0..6 {
        let mdp = build_cyclic_chain(5, seed, 0.9).unwrap();
        let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        let c = oracle_compare(&mdp, &v.0, 0.05).unwrap();
        assert!(c.near_greedy_converged);
        assert!(c.oracle_size >= c.near_greedy_size.unwrap());
        assert!(c.oracle_ratio.unwrap() >= 0.95 - 1e-9);
        if seed == 1 {
            assert!(c.identical);
        }
    }
    let mdp = build_cyclic_chain(5, 0, 0.9).unwrap();
    let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
    let everything = oracle_compare(&mdp, &v.0, 1.0).unwrap();
    assert_eq!(everything.oracle_average, 4.0);
    let (_, trace) = near_greedy_vi(&mdp, &v.0, 0.2, DEFAULT_MAX_SWEEPS, DEFAULT_WINDOW).unwrap();
    assert!(!trace.converged);
}
