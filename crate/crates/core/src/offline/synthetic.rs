//! A sepsis-like layered MDP with sparse terminal rewards, and logged
//! trajectories from a noisy near-optimal behavior policy.
//!
//! States are (time step, severity) pairs. Every step either moves to the
//! next time step with a new severity, or ends the episode. Discharge pays
//! `+reward_scale` and death pays `-reward_scale`; all other rewards are 0.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Episode, IngestOptions, SplitFractions, Step, TrajectoryDataset};
use super::ope::StochasticPolicy;
use crate::error::{Result, SvpError};
use crate::mdp::{Environment, MdpBuilder, QTable, TabularMdp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SepsisConfig {
    pub layers: usize,
    pub severities: usize,
    pub actions: usize,
    pub reward_scale: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for SepsisConfig {
    fn default() -> Self {
        Self { layers: 5, severities: 4, actions: 4, reward_scale: 1.0, gamma: 0.99, seed: 0 }
    }
}

/// Index of the discharge terminal; death is the next index.
pub fn discharge_state(config: &SepsisConfig) -> usize {
    config.layers * config.severities
}

pub fn build_sepsis_mdp(config: &SepsisConfig) -> Result<TabularMdp> {
    let (l, k, m) = (config.layers, config.severities, config.actions);
    if l == 0 || k < 2 || m == 0 {
        return Err(SvpError::InvalidConfig("sepsis MDP needs layers, two severities and actions".into()));
    }
    if !(config.reward_scale > 0.0 && config.reward_scale.is_finite()) {
        return Err(SvpError::InvalidConfig("reward scale must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let discharge = discharge_state(config);
    let death = discharge + 1;
    let severity = |sev: usize| sev as f64 / (k - 1) as f64;

    // Per (severity, action): chance of improving, of worsening, and a death
    // multiplier. One or two treatments per severity are good and nearly
    // interchangeable; the rest are clearly worse.
    let mut effects = vec![(0.0, 0.0, 0.0); k * m];
    for sev in 0..k {
        let good = if m > 1 && rng.random_bool(0.5) { 2 } else { 1 };
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        for (rank, &a) in order.iter().enumerate() {
            effects[sev * m + a] = if rank < good {
                (rng.random_range(0.45..0.5), rng.random_range(0.05..0.07), rng.random_range(0.5..0.55))
            } else {
                (rng.random_range(0.1..0.25), rng.random_range(0.2..0.3), rng.random_range(1.2..1.5))
            };
        }
    }

    let mut b = MdpBuilder::new(l * k + 2, m, config.gamma);
    b.terminal(discharge).terminal(death);
    for layer in 0..l {
        for sev in 0..k {
            let s = layer * k + sev;
            for a in 0..m {
                let (up, down, lethality) = effects[sev * m + a];
                let p_death = (0.03 + 0.2 * severity(sev)) * lethality;
                let p_leave = if sev == 0 { 0.3 } else { 0.0 };
                let rest = 1.0 - p_death - p_leave;
                let mut next = vec![(death, p_death)];
                let mut reward = -config.reward_scale * p_death;
                if p_leave > 0.0 {
                    next.push((discharge, p_leave));
                    reward += config.reward_scale * p_leave;
                }
                if layer + 1 == l {
                    // Survivors of the last step leave the hospital, the sicker ones less often.
                    let survive = rest * (1.0 - 0.5 * severity(sev));
                    next.push((discharge, survive));
                    next.push((death, rest - survive));
                    reward += config.reward_scale * (survive - (rest - survive));
                } else {
                    let better = if sev > 0 { up } else { 0.0 };
                    let worse = if sev + 1 < k { down } else { 0.0 };
                    let base = (layer + 1) * k;
                    if sev > 0 {
                        next.push((base + sev - 1, rest * better));
                    }
                    if sev + 1 < k {
                        next.push((base + sev + 1, rest * worse));
                    }
                    next.push((base + sev, rest * (1.0 - better - worse)));
                }
                b.transition(s, a, &next).reward(s, a, reward);
            }
        }
    }
    let mut start = vec![0.0; l * k + 2];
    let weights: Vec<f64> = (0..k).map(|sev| (k - sev) as f64).collect();
    let total: f64 = weights.iter().sum();
    for (sev, w) in weights.iter().enumerate() {
        start[sev] = w / total;
    }
    b.start(start);
    b.state_labels(
        (0..l)
            .flat_map(|layer| (0..k).map(move |sev| format!("t{layer}-sev{sev}")))
            .chain(["discharged".to_string(), "died".to_string()])
            .collect(),
    );
    b.build()
}

/// `(1 - noise)` spread uniformly over the actions within `margin |V*(s)|`
/// of the best `Q*(s, .)`, plus `noise` spread uniformly over all actions.
pub fn noisy_near_greedy_policy(mdp: &TabularMdp, q: &QTable, margin: f64, noise: f64) -> Result<StochasticPolicy> {
    if !(0.0..=1.0).contains(&noise) || margin < 0.0 {
        return Err(SvpError::InvalidConfig(format!("noise {noise} and margin {margin} out of range")));
    }
    let m = mdp.action_count();
    let rows = (0..mdp.state_count())
        .map(|s| {
            let best = q.max(s);
            let near: Vec<usize> = (0..m).filter(|&a| q.get(s, a) >= best - margin * best.abs()).collect();
            let mut row = vec![noise / m as f64; m];
            for &a in &near {
                row[a] += (1.0 - noise) / near.len() as f64;
            }
            row
        })
        .collect();
    StochasticPolicy::new(rows)
}

/// Roll out `episodes` episodes of `policy` from the start distribution.
///
/// The terminal reward convention is per step: the logged reward is the
/// realized outcome (`+scale` into discharge, `-scale` into death, 0
/// otherwise), so `r` is a sample whose mean is `mdp.reward(s, a)`.
pub fn generate_episodes(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    outcome_reward: impl Fn(usize, usize, usize) -> f64,
    episodes: usize,
    max_steps: usize,
    seed: u64,
) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes)
        .map(|i| {
            let mut s = mdp.reset(&mut rng);
            let mut steps = Vec::new();
            for _ in 0..max_steps {
                let a = crate::mdp::sample_index(policy.row(s).iter().copied().enumerate(), &mut rng);
                let t = mdp.step(s, a, &mut rng);
                steps.push(Step { s, a, r: outcome_reward(s, a, t.next), sp: t.next, done: t.done });
                if t.done {
                    break;
                }
                s = t.next;
            }
            Episode { id: format!("ep-{i:06}"), steps }
        })
        .collect()
}

/// Logged episodes from the sepsis MDP with realized terminal outcomes.
pub fn generate_sepsis_dataset(
    config: &SepsisConfig,
    mdp: &TabularMdp,
    behavior: &StochasticPolicy,
    episodes: usize,
    seed: u64,
    fractions: SplitFractions,
) -> Result<TrajectoryDataset> {
    let discharge = discharge_state(config);
    let scale = config.reward_scale;
    let outcome = |_: usize, _: usize, next: usize| {
        if next == discharge {
            scale
        } else if next == discharge + 1 {
            -scale
        } else {
            0.0
        }
    };
    let logged = generate_episodes(mdp, behavior, outcome, episodes, config.layers + 1, seed);
    let options =
        IngestOptions { state_count: Some(mdp.state_count()), action_count: Some(mdp.action_count()), fractions };
    TrajectoryDataset::from_episodes(logged, &options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::dag_decompose;
    use crate::solve::{value_iteration, DEFAULT_TOLERANCE};

    #[test]
    fn sepsis_mdp_is_a_dag_with_mixed_signs() {
        let config = SepsisConfig::default();
        let mdp = build_sepsis_mdp(&config).unwrap();
        assert!(dag_decompose(&mdp).is_dag);
        let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        assert!(v.iter().any(|&x| x > 0.0));
        assert!(v.iter().any(|&x| x < 0.0));
    }

    #[test]
    fn logged_rewards_average_to_model_rewards() {
        let config = SepsisConfig::default();
        let mdp = build_sepsis_mdp(&config).unwrap();
        let uniform = StochasticPolicy::uniform(mdp.state_count(), mdp.action_count());
        let data = generate_sepsis_dataset(&config, &mdp, &uniform, 20_000, 1, SplitFractions::default()).unwrap();
        let mut sums = vec![(0.0, 0usize); mdp.state_count() * mdp.action_count()];
        for ep in data.episodes() {
            assert!(ep.steps.len() <= config.layers);
            for t in &ep.steps {
                let e = &mut sums[t.s * mdp.action_count() + t.a];
                e.0 += t.r;
                e.1 += 1;
            }
        }
        let (s, a) = (0, 0);
        let (total, n) = sums[s * mdp.action_count() + a];
        assert!((total / n as f64 - mdp.reward(s, a)).abs() < 0.05);
    }
}
