//! Learning set-valued policies from logged trajectories and evaluating them
//! off-policy.

pub mod dataset;
pub mod mask;
pub mod ope;
pub mod synthetic;
pub mod train;

pub use dataset::{Episode, IngestOptions, Split, SplitFractions, Step, TrajectoryDataset};
pub use mask::{build_action_mask, ActionMask, DEFAULT_MIN_COUNT};
pub use ope::{
    bootstrap_ci, effective_samples, empirical_mdp, estimate_behavior_policy, exact_policy_value, exact_start_value,
    ope_dr, ope_report, ope_wdr, soften, BootstrapResult, EffectiveSamples, Estimator, OpeInputs, OpeModel, OpeReport,
    SoftenedPolicy, StochasticPolicy, DEFAULT_BOOTSTRAP_DRAWS, DEFAULT_RECOMMENDED_MASS, DEFAULT_SMOOTHING,
};
pub use synthetic::{
    build_sepsis_mdp, generate_episodes, generate_sepsis_dataset, noisy_near_greedy_policy, SepsisConfig,
};
pub use train::{masked_values, offline_near_greedy_train, offline_q_learning, OfflineConfig, OfflineOutcome};

use crate::error::Result;

/// Result of [`offline_pipeline`].
#[derive(Debug, Clone)]
pub struct OfflinePipeline {
    pub mask: ActionMask,
    /// Masked maxima of the offline Q-learning weights.
    pub v_star: Vec<f64>,
    pub q_learning: OfflineOutcome,
    pub near_greedy: OfflineOutcome,
}

/// Mask, offline Q-learning for `V*`, then offline near-greedy training.
pub fn offline_pipeline(data: &TrajectoryDataset, min_count: u64, config: &OfflineConfig) -> Result<OfflinePipeline> {
    let mask = build_action_mask(data, min_count);
    let q_learning = offline_q_learning(data, &mask, config)?;
    let v_star = q_learning.values(&mask, data.terminal_mask());
    let near_greedy = offline_near_greedy_train(data, &mask, &v_star, config)?;
    Ok(OfflinePipeline { mask, v_star, q_learning, near_greedy })
}

/// Behavior noise used for the synthetic sepsis data.
pub const SEPSIS_BEHAVIOR_NOISE: f64 = 0.5;
/// Relative margin inside which the synthetic clinician treats actions as equally good.
pub const SEPSIS_BEHAVIOR_MARGIN: f64 = 0.05;
pub const SEPSIS_EPISODES: usize = 50_000;

/// One end-to-end run on freshly generated sepsis-like data.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SepsisTrial {
    pub seed: u64,
    /// `min V^pi / V*` of the learned SVP on the generating MDP.
    pub worst_case_ratio: Option<f64>,
    pub average_policy_size: f64,
    pub converged: bool,
    /// Exact `mu^T V` of the softened policy on the generating MDP.
    pub softened_value: f64,
    pub reports: Vec<OpeReport>,
}

/// Generate data, train offline, soften the SVP and evaluate it on the test split.
pub fn run_sepsis_trial(
    config: &SepsisConfig,
    episodes: usize,
    offline: &OfflineConfig,
    estimators: &[Estimator],
    draws: usize,
    seed: u64,
) -> Result<SepsisTrial> {
    let mdp = build_sepsis_mdp(config)?;
    let (q, v) = crate::solve::value_iteration(&mdp, crate::solve::DEFAULT_TOLERANCE)?;
    let behavior = noisy_near_greedy_policy(&mdp, &q, SEPSIS_BEHAVIOR_MARGIN, SEPSIS_BEHAVIOR_NOISE)?;
    let data = generate_sepsis_dataset(config, &mdp, &behavior, episodes, seed, SplitFractions::default())?;
    let offline = OfflineConfig { gamma: config.gamma, seed, ..offline.clone() };
    let run = offline_pipeline(&data, DEFAULT_MIN_COUNT, &offline)?;
    let metrics = crate::metrics::compute_metrics(&mdp, &run.near_greedy.policy, &v)?;
    let target = soften(&run.near_greedy.policy, DEFAULT_RECOMMENDED_MASS)?;
    let softened_value = exact_start_value(&mdp, &target)?;
    let estimated = estimate_behavior_policy(&data, DEFAULT_SMOOTHING)?;
    let model = OpeModel::fit(&data, &target, config.gamma)?;
    let inputs = OpeInputs { target: &target, behavior: &estimated, model: &model, gamma: config.gamma };
    let test = data.split(Split::Test);
    let reports = estimators.iter().map(|&e| ope_report(e, &test, &inputs, draws, seed)).collect::<Result<Vec<_>>>()?;
    Ok(SepsisTrial {
        seed,
        worst_case_ratio: metrics.worst_case_ratio,
        average_policy_size: metrics.average_policy_size_nonterminal,
        converged: run.near_greedy.trace.converged,
        softened_value,
        reports,
    })
}
