use svp_core::env::build_chain;
use svp_core::learn::{near_greedy_td, LearnConfig};
use svp_core::offline::*;
use svp_core::solve::{value_iteration, DEFAULT_TOLERANCE};
use svp_core::svp::{solve_policy, Algorithm};
use svp_core::{SetValuedPolicy, TabularMdp};

fn all_train() -> SplitFractions {
    SplitFractions { train: 1.0, validation: 0.0, test: 0.0 }
}

fn logged(
    mdp: &TabularMdp,
    behavior: &StochasticPolicy,
    episodes: usize,
    seed: u64,
    fractions: SplitFractions,
) -> TrajectoryDataset {
    let eps = generate_episodes(mdp, behavior, |s, a, _| mdp.reward(s, a), episodes, 100, seed);
    let options =
        IngestOptions { state_count: Some(mdp.state_count()), action_count: Some(mdp.action_count()), fractions };
    TrajectoryDataset::from_episodes(eps, &options).unwrap()
}

fn mean_return(episodes: &[&Episode], gamma: f64) -> (f64, f64) {
    let returns: Vec<f64> = episodes.iter().map(|e| e.discounted_return(gamma)).collect();
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn one_hot_training_reproduces_tabular_td() {
    let mdp = build_chain(5, 0, 0.9).unwrap();
    let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
    let uniform = StochasticPolicy::uniform(5, 4);
    let data = logged(&mdp, &uniform, 200_000, 11, all_train());
    let mask = build_action_mask(&data, DEFAULT_MIN_COUNT);
    assert!((0..4).all(|s| mask.allowed(s).len() == 4));

    let config = OfflineConfig { zeta: 0.05, gamma: 0.9, seed: 3, ..OfflineConfig::default() };
    let offline = offline_near_greedy_train(&data, &mask, &v.0, &config).unwrap();
    let online = near_greedy_td(&mdp, &v.0, &LearnConfig::new(0.05, 200_000, 3)).unwrap();
    let gap = offline.weights.sup_distance(&online.q);
    assert!(gap <= 0.05, "offline and online Q differ by {gap}");
    assert!(offline.policy.same_sets(&online.policy));
}

#[test]
fn zero_zeta_offline_training_is_greedy() {
    let mdp = build_chain(5, 2, 0.9).unwrap();
    let (q, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
    let data = logged(&mdp, &StochasticPolicy::uniform(5, 4), 50_000, 5, all_train());
    let mask = build_action_mask(&data, DEFAULT_MIN_COUNT);
    let config = OfflineConfig { zeta: 0.0, gamma: 0.9, episodes: 50_000, ..OfflineConfig::default() };
    let run = offline_pipeline(&data, DEFAULT_MIN_COUNT, &config).unwrap();
    let greedy = SetValuedPolicy::greedy(&mdp, &q);
    assert!(run.q_learning.policy.same_sets(&greedy));
    assert!(run.near_greedy.policy.same_sets(&greedy));
    for s in 0..5 {
        assert!((run.v_star[s] - v.0[s]).abs() < 1e-3, "state {s}");
    }
    assert_eq!(run.mask, mask);
}

fn sepsis() -> (SepsisConfig, TabularMdp, StochasticPolicy) {
    let config = SepsisConfig::default();
    let mdp = build_sepsis_mdp(&config).unwrap();
    let (q, _) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
    let behavior = noisy_near_greedy_policy(&mdp, &q, SEPSIS_BEHAVIOR_MARGIN, SEPSIS_BEHAVIOR_NOISE).unwrap();
    (config, mdp, behavior)
}

#[test]
fn on_policy_estimates_equal_the_mean_return() {
    let (config, mdp, behavior) = sepsis();
    let data = generate_sepsis_dataset(&config, &mdp, &behavior, 20_000, 4, all_train()).unwrap();
    let episodes = data.split(Split::Train);
    let model = OpeModel::exact(&mdp, &behavior).unwrap();
    let inputs = OpeInputs { target: &behavior, behavior: &behavior, model: &model, gamma: config.gamma };
    let (mean, se) = mean_return(&episodes, config.gamma);
    let dr = ope_dr(&episodes, &inputs).unwrap();
    let wdr = ope_wdr(&episodes, &inputs).unwrap();
    assert!((dr - mean).abs() < 4.0 * se, "dr {dr} mean {mean} se {se}");
    assert!((wdr - mean).abs() < 4.0 * se, "wdr {wdr} mean {mean} se {se}");
    assert!((dr - wdr).abs() < 1e-9, "on-policy weights are all one");
}

#[test]
fn perfect_model_recovers_the_start_value() {
    let (config, mdp, behavior) = sepsis();
    let data = generate_sepsis_dataset(&config, &mdp, &behavior, 20_000, 9, all_train()).unwrap();
    let episodes = data.split(Split::Train);
    let solved = solve_policy(&mdp, Algorithm::ValueIteration, 0.0).unwrap();
    let target = soften(&solved.policy, 0.9).unwrap();
    let truth = exact_start_value(&mdp, &target).unwrap();
    let model = OpeModel::exact(&mdp, &target).unwrap();
    let inputs = OpeInputs { target: &target, behavior: &behavior, model: &model, gamma: config.gamma };
    for estimator in [Estimator::Dr, Estimator::Wdr] {
        let estimate = estimator.estimate(&episodes, &inputs).unwrap();
        assert!((estimate - truth).abs() < 0.02, "{} {estimate} vs {truth}", estimator.name());
    }
}

#[test]
fn bootstrap_intervals_cover_the_truth() {
    let (config, mdp, behavior) = sepsis();
    let solved = solve_policy(&mdp, Algorithm::ValueIteration, 0.0).unwrap();
    let target = soften(&solved.policy, 0.9).unwrap();
    let truth = exact_start_value(&mdp, &target).unwrap();
    let covered = (0..50u64)
        .filter(|&trial| {
            let data = generate_sepsis_dataset(&config, &mdp, &behavior, 2_000, 1_000 + trial, all_train()).unwrap();
            let estimated = estimate_behavior_policy(&data, DEFAULT_SMOOTHING).unwrap();
            let model = OpeModel::fit(&data, &target, config.gamma).unwrap();
            let inputs = OpeInputs { target: &target, behavior: &estimated, model: &model, gamma: config.gamma };
            let episodes = data.split(Split::Train);
            let ci = bootstrap_ci(&episodes, |s| ope_wdr(s, &inputs), 200, trial).unwrap();
            ci.lower <= truth && truth <= ci.upper
        })
        .count();
    assert!(covered >= 45, "covered {covered} of 50");
}

#[test]
fn softened_rows_and_reports_are_consistent() {
    let (config, mdp, behavior) = sepsis();
    let data = generate_sepsis_dataset(&config, &mdp, &behavior, 3_000, 2, SplitFractions::default()).unwrap();
    let solved = solve_policy(&mdp, Algorithm::ValueIteration, 0.0).unwrap();
    let target = soften(&solved.policy, DEFAULT_RECOMMENDED_MASS).unwrap();
    for row in target.rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let estimated = estimate_behavior_policy(&data, DEFAULT_SMOOTHING).unwrap();
    let model = OpeModel::fit(&data, &target, config.gamma).unwrap();
    let inputs = OpeInputs { target: &target, behavior: &estimated, model: &model, gamma: config.gamma };
    let test = data.split(Split::Test);
    let a = ope_report(Estimator::Wdr, &test, &inputs, 100, 1).unwrap();
    let b = ope_report(Estimator::Wdr, &test, &inputs, 100, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.episodes, test.len());
    assert!(a.usable_episodes <= a.episodes);
    assert!(a.effective_sample_size > 0.0 && a.effective_sample_size <= a.episodes as f64 + 1e-9);
    assert!(a.ci_lower <= a.mean && a.mean <= a.ci_upper);
}

#[test]
fn jsonl_round_trip_preserves_the_dataset() {
    let (config, mdp, behavior) = sepsis();
    let data = generate_sepsis_dataset(&config, &mdp, &behavior, 200, 8, SplitFractions::default()).unwrap();
    let mut bytes = Vec::new();
    data.write_jsonl(&mut bytes).unwrap();
    let options = IngestOptions {
        state_count: Some(mdp.state_count()),
        action_count: Some(mdp.action_count()),
        ..IngestOptions::default()
    };
    let back = TrajectoryDataset::from_jsonl(bytes.as_slice(), &options).unwrap();
    assert_eq!(back.episodes(), data.episodes());
    assert_eq!(back.split_sizes(), data.split_sizes());
}
