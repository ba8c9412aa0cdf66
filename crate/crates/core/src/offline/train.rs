//! Offline TD over replayed training episodes with a one-hot linear Q.
//!
//! With one-hot state-action features the gradient step on the squared TD
//! error touches a single weight, so the weight vector is stored as a
//! [`QTable`] and `Q(s, a)` is the weight at `(s, a)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Split, TrajectoryDataset};
use super::mask::ActionMask;
use crate::error::{Result, SvpError};
use crate::learn::{StepSchedule, TargetRule};
use crate::mdp::QTable;
use crate::policy::{ActionSet, SetValuedPolicy};
use crate::svp::ConvergenceTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OfflineConfig {
    pub zeta: f64,
    pub gamma: f64,
    /// Replayed episodes, each drawn uniformly with replacement from the training split.
    pub episodes: usize,
    pub schedule: StepSchedule,
    pub seed: u64,
    pub membership_slack: f64,
    pub checkpoint_every: usize,
    pub window: usize,
    pub delta_threshold: f64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            zeta: 0.05,
            gamma: 0.99,
            episodes: 200_000,
            schedule: StepSchedule::EpisodeExponential { alpha0: 0.1, factor: 0.97, every: 1_000 },
            seed: 0,
            membership_slack: 0.0,
            checkpoint_every: 1_000,
            window: 50,
            delta_threshold: 1e-3,
        }
    }
}

impl OfflineConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let bad = |msg: &str| Err(SvpError::InvalidConfig(msg.to_string()));
        if !(0.0..=1.0).contains(&self.zeta) {
            return bad("zeta must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.episodes == 0 || self.checkpoint_every == 0 || self.window == 0 {
            return bad("episodes, checkpoint_every and window must be positive");
        }
        if self.membership_slack < 0.0 || self.delta_threshold < 0.0 {
            return bad("slack and delta threshold must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OfflineOutcome {
    pub weights: QTable,
    pub policy: SetValuedPolicy,
    pub trace: ConvergenceTrace,
}

impl OfflineOutcome {
    /// `max` of the weights over masked actions; zero at terminals.
    pub fn values(&self, mask: &ActionMask, terminal: &[bool]) -> Vec<f64> {
        masked_values(&self.weights, mask, terminal)
    }
}

pub fn masked_values(q: &QTable, mask: &ActionMask, terminal: &[bool]) -> Vec<f64> {
    (0..q.state_count())
        .map(|s| if terminal[s] { 0.0 } else { mask.allowed(s).max_over(q.row(s)).unwrap_or(0.0) })
        .collect()
}

fn final_sets(
    data: &TrajectoryDataset,
    q: &QTable,
    mask: &ActionMask,
    rule: &TargetRule,
    slack: f64,
) -> Vec<ActionSet> {
    let full = ActionSet::full(data.action_count());
    (0..data.state_count())
        .map(|s| if data.is_terminal(s) { full } else { rule.final_set(q.row(s), mask.allowed(s), s, slack) })
        .collect()
}

fn offline_td(
    data: &TrajectoryDataset,
    mask: &ActionMask,
    rule: &TargetRule,
    config: &OfflineConfig,
) -> Result<OfflineOutcome> {
    config.validate()?;
    if mask.state_count() != data.state_count() {
        return Err(SvpError::InvalidConfig("mask does not match the dataset".into()));
    }
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(SvpError::Dataset("training split is empty".into()));
    }
    let (n, m) = (data.state_count(), data.action_count());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights = QTable::zeros(n, m);
    let mut visits = vec![0u64; n * m];
    let mut trace = ConvergenceTrace::new(config.window, config.checkpoint_every, config.delta_threshold, "episode");
    let mut last_checkpoint = weights.clone();

    for episode in 0..config.episodes {
        let ep = train[rng.random_range(0..train.len())];
        for step in &ep.steps {
            let future = if step.done {
                0.0
            } else {
                rule.target(weights.row(step.sp), mask.allowed(step.sp), step.sp, config.membership_slack)
            };
            let k = step.s * m + step.a;
            let alpha = config.schedule.alpha(visits[k], episode);
            visits[k] += 1;
            let current = weights.get(step.s, step.a);
            weights.set(step.s, step.a, current + alpha * (step.r + config.gamma * future - current));
        }
        if (episode + 1) % config.checkpoint_every == 0 || episode + 1 == config.episodes {
            let delta = weights.sup_distance(&last_checkpoint);
            trace.record(final_sets(data, &weights, mask, rule, config.membership_slack), delta);
            last_checkpoint = weights.clone();
        }
    }

    let sets = final_sets(data, &weights, mask, rule, config.membership_slack);
    let source = match rule {
        TargetRule::Greedy => "offline-q-learning",
        _ => "offline-near-greedy",
    };
    let zeta = if matches!(rule, TargetRule::Greedy) { 0.0 } else { config.zeta };
    let mut policy = SetValuedPolicy::new(sets, m, zeta, source)?;
    policy.gamma = Some(config.gamma);
    policy.q = Some(weights.clone());
    if let TargetRule::NearGreedy { v_star, .. } = rule {
        policy.v_star = Some(v_star.clone());
    }
    Ok(OfflineOutcome { weights, policy, trace })
}

/// Offline Q-learning with targets maximized over masked actions.
pub fn offline_q_learning(
    data: &TrajectoryDataset,
    mask: &ActionMask,
    config: &OfflineConfig,
) -> Result<OfflineOutcome> {
    offline_td(data, mask, &TargetRule::Greedy, config)
}

/// Offline near-greedy TD. Candidate sets and targets only consider masked
/// actions; successors with `V*(s') < 0` bootstrap from the masked maximum.
pub fn offline_near_greedy_train(
    data: &TrajectoryDataset,
    mask: &ActionMask,
    v_star: &[f64],
    config: &OfflineConfig,
) -> Result<OfflineOutcome> {
    if v_star.len() != data.state_count() {
        return Err(SvpError::InvalidConfig("V* length does not match the dataset".into()));
    }
    let rule = TargetRule::NearGreedy { v_star: v_star.to_vec(), zeta: config.zeta };
    offline_td(data, mask, &rule, config)
}
