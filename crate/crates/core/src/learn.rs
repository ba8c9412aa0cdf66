//! Online temporal-difference learners: Q-learning, near-greedy TD and the
//! Q-based TD baseline, all sharing one epsilon-greedy episode loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvpError};
use crate::mdp::{Environment, QTable};
use crate::policy::{ActionSet, SetValuedPolicy};
use crate::svp::{greedy_ties, near_greedy_set, near_greedy_target, ConvergenceTrace};

/// Step-size families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant {
        alpha: f64,
    },
    /// `alpha0 / (1 + n / decay)` where `n` counts earlier visits of `(s, a)`.
    Harmonic {
        alpha0: f64,
        decay: f64,
    },
    /// `alpha0 * factor^(episode / every)`, shared by all pairs.
    EpisodeExponential {
        alpha0: f64,
        factor: f64,
        every: usize,
    },
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Harmonic { alpha0: 0.5, decay: 100.0 }
    }
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        let ok = match *self {
            StepSchedule::Constant { alpha } => unit(alpha),
            StepSchedule::Harmonic { alpha0, decay } => unit(alpha0) && decay > 0.0 && decay.is_finite(),
            StepSchedule::EpisodeExponential { alpha0, factor, every } => unit(alpha0) && unit(factor) && every > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(SvpError::InvalidConfig(format!("step sizes of {self:?} must lie in (0, 1]")))
        }
    }

    pub fn alpha(&self, visits: u64, episode: usize) -> f64 {
        match *self {
            StepSchedule::Constant { alpha } => alpha,
            StepSchedule::Harmonic { alpha0, decay } => alpha0 / (1.0 + visits as f64 / decay),
            StepSchedule::EpisodeExponential { alpha0, factor, every } => {
                alpha0 * factor.powi((episode / every) as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    pub zeta: f64,
    pub schedule: StepSchedule,
    pub epsilon: f64,
    pub episodes: usize,
    pub seed: u64,
    /// Slack on the candidate-set threshold, both during updates and for the final sets.
    pub membership_slack: f64,
    pub max_steps: usize,
    pub checkpoint_every: usize,
    pub window: usize,
    /// Largest sup-norm Q change between checkpoints that still counts as settled.
    pub delta_threshold: f64,
    /// Start episodes from a uniformly drawn non-terminal state instead of the
    /// environment's start distribution.
    pub exploring_starts: bool,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            zeta: 0.05,
            schedule: StepSchedule::default(),
            epsilon: 0.1,
            episodes: 200_000,
            seed: 0,
            membership_slack: 0.0,
            max_steps: 1_000,
            checkpoint_every: 1_000,
            window: 50,
            delta_threshold: 1e-3,
            exploring_starts: false,
        }
    }
}

impl LearnConfig {
    pub fn new(zeta: f64, episodes: usize, seed: u64) -> Self {
        Self { zeta, episodes, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let bad = |msg: &str| Err(SvpError::InvalidConfig(msg.to_string()));
        if !(0.0..=1.0).contains(&self.zeta) {
            return bad("zeta must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("exploration epsilon must lie in [0, 1]");
        }
        if self.episodes == 0 || self.max_steps == 0 || self.checkpoint_every == 0 || self.window == 0 {
            return bad("episodes, max_steps, checkpoint_every and window must be positive");
        }
        if self.membership_slack < 0.0 || self.delta_threshold < 0.0 {
            return bad("slack and delta threshold must be non-negative");
        }
        Ok(())
    }
}

/// How the bootstrap target at the successor state is formed.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetRule {
    /// `max_a Q(s', a)`: plain Q-learning.
    Greedy,
    /// Minimum over `{a : Q(s',a) >= (1 - zeta) V*(s')}`, greedy when empty or `V*(s') < 0`.
    NearGreedy { v_star: Vec<f64>, zeta: f64 },
    /// As `NearGreedy` with `max_a Q(s', a)` standing in for `V*(s')`.
    QBased { zeta: f64 },
}

impl TargetRule {
    pub(crate) fn target(&self, row: &[f64], allowed: ActionSet, state: usize, slack: f64) -> f64 {
        match self {
            TargetRule::Greedy => allowed.max_over(row).unwrap_or(0.0),
            TargetRule::NearGreedy { v_star, zeta } => near_greedy_target(row, allowed, v_star[state], *zeta, slack).1,
            TargetRule::QBased { zeta } => {
                let v = allowed.max_over(row).unwrap_or(0.0);
                near_greedy_target(row, allowed, v, *zeta, slack).1
            }
        }
    }

    pub(crate) fn final_set(&self, row: &[f64], allowed: ActionSet, state: usize, slack: f64) -> ActionSet {
        match self {
            TargetRule::Greedy => greedy_ties(row, allowed, slack),
            TargetRule::NearGreedy { v_star, zeta } => near_greedy_set(row, allowed, v_star[state], *zeta, slack),
            TargetRule::QBased { zeta } => {
                let v = allowed.max_over(row).unwrap_or(0.0);
                near_greedy_set(row, allowed, v, *zeta, slack)
            }
        }
    }

    fn source(&self) -> &'static str {
        match self {
            TargetRule::Greedy => "q-learning",
            TargetRule::NearGreedy { .. } => "near-greedy-td",
            TargetRule::QBased { .. } => "q-based-td",
        }
    }

    fn zeta(&self) -> f64 {
        match self {
            TargetRule::Greedy => 0.0,
            TargetRule::NearGreedy { zeta, .. } | TargetRule::QBased { zeta } => *zeta,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TdOutcome {
    pub q: QTable,
    pub policy: SetValuedPolicy,
    pub trace: ConvergenceTrace,
}

/// Greedy action with uniform tie-breaking.
fn greedy_action<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties = row.iter().filter(|&&q| q == best).count();
    let pick = if ties > 1 { rng.random_range(0..ties) } else { 0 };
    row.iter().enumerate().filter(|(_, &q)| q == best).nth(pick).map(|(a, _)| a).expect("at least one maximal action")
}

/// Sets derived from the current Q, full at terminal states.
fn derived_sets<E: Environment>(env: &E, q: &QTable, rule: &TargetRule, slack: f64) -> Vec<ActionSet> {
    let full = ActionSet::full(env.action_count());
    (0..env.state_count())
        .map(|s| if env.is_terminal(s) { full } else { rule.final_set(q.row(s), full, s, slack) })
        .collect()
}

/// Epsilon-greedy TD control from `Q = 0` with the given bootstrap rule.
pub fn td_learn<E: Environment>(env: &E, rule: &TargetRule, config: &LearnConfig) -> Result<TdOutcome> {
    config.validate()?;
    if let TargetRule::NearGreedy { v_star, .. } = rule {
        if v_star.len() != env.state_count() {
            return Err(SvpError::InvalidConfig("V* length does not match the environment".into()));
        }
    }
    let n = env.state_count();
    let m = env.action_count();
    let gamma = env.gamma();
    let full = ActionSet::full(m);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut q = QTable::zeros(n, m);
    let mut visits = vec![0u64; n * m];
    let mut trace = ConvergenceTrace::new(config.window, config.checkpoint_every, config.delta_threshold, "episode");
    let mut last_checkpoint = q.clone();
    let starts: Vec<usize> = (0..n).filter(|&s| !env.is_terminal(s)).collect();
    if starts.is_empty() {
        return Err(SvpError::InvalidConfig("environment has no non-terminal state".into()));
    }

    for episode in 0..config.episodes {
        let mut s =
            if config.exploring_starts { starts[rng.random_range(0..starts.len())] } else { env.reset(&mut rng) };
        for _ in 0..config.max_steps {
            if env.is_terminal(s) {
                break;
            }
            let a = if rng.random::<f64>() < config.epsilon {
                rng.random_range(0..m)
            } else {
                greedy_action(q.row(s), &mut rng)
            };
            let step = env.step(s, a, &mut rng);
            let future =
                if step.done { 0.0 } else { rule.target(q.row(step.next), full, step.next, config.membership_slack) };
            let k = s * m + a;
            let alpha = config.schedule.alpha(visits[k], episode);
            visits[k] += 1;
            let current = q.get(s, a);
            q.set(s, a, current + alpha * (step.reward + gamma * future - current));
            if step.done {
                break;
            }
            s = step.next;
        }
        let done = episode + 1 == config.episodes;
        if (episode + 1) % config.checkpoint_every == 0 || done {
            let delta = q.sup_distance(&last_checkpoint);
            trace.record(derived_sets(env, &q, rule, config.membership_slack), delta);
            last_checkpoint = q.clone();
        }
    }

    let sets = derived_sets(env, &q, rule, config.membership_slack);
    let mut policy = SetValuedPolicy::new(sets, m, rule.zeta(), rule.source())?;
    policy.gamma = Some(gamma);
    policy.q = Some(q.clone());
    if let TargetRule::NearGreedy { v_star, .. } = rule {
        policy.v_star = Some(v_star.clone());
    }
    Ok(TdOutcome { q, policy, trace })
}

/// Tabular Q-learning with epsilon-greedy exploration.
pub fn q_learning<E: Environment>(
    env: &E,
    episodes: usize,
    schedule: StepSchedule,
    epsilon: f64,
    seed: u64,
) -> Result<QTable> {
    let config = LearnConfig { schedule, epsilon, episodes, seed, zeta: 0.0, ..LearnConfig::default() };
    Ok(td_learn(env, &TargetRule::Greedy, &config)?.q)
}

/// Near-greedy TD: the bootstrap target is the worst action among those
/// clearing `(1 - zeta) V*` at the successor.
pub fn near_greedy_td<E: Environment>(env: &E, v_star: &[f64], config: &LearnConfig) -> Result<TdOutcome> {
    td_learn(env, &TargetRule::NearGreedy { v_star: v_star.to_vec(), zeta: config.zeta }, config)
}

/// Q-based TD baseline: the threshold uses the learner's own `max_a Q`.
pub fn q_based_td<E: Environment>(env: &E, config: &LearnConfig) -> Result<TdOutcome> {
    td_learn(env, &TargetRule::QBased { zeta: config.zeta }, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env;
    use crate::mdp::MdpBuilder;
    use crate::solve::{svp_policy_evaluation, value_iteration, DEFAULT_TOLERANCE};
    use crate::svp::near_greedy_construct_dag;

    #[test]
    fn schedules_validate() {
        assert!(StepSchedule::Constant { alpha: 0.0 }.validate().is_err());
        assert!(StepSchedule::Constant { alpha: 1.5 }.validate().is_err());
        assert!(StepSchedule::Harmonic { alpha0: 0.5, decay: 0.0 }.validate().is_err());
        let exp = StepSchedule::EpisodeExponential { alpha0: 0.5, factor: 0.5, every: 1000 };
        assert_eq!(exp.alpha(0, 1999), 0.25);
        assert_eq!(StepSchedule::Harmonic { alpha0: 0.5, decay: 10.0 }.alpha(10, 0), 0.25);
    }

    #[test]
    fn chain2_q_learning_reaches_q_star() {
        let mdp = env::build_chain_from_rewards(&[vec![0.0, 0.01, 0.04, 0.05]], 0.9).unwrap();
        let (q_star, _) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        let q = q_learning(&mdp, 50_000, StepSchedule::Constant { alpha: 0.1 }, 0.1, 3).unwrap();
        assert!(q.sup_distance(&q_star) <= 0.01);
    }

    #[test]
    fn zero_rewards_learn_nothing() {
        let mut b = MdpBuilder::new(3, 2, 0.9);
        b.transition(0, 0, &[(1, 0.5), (2, 0.5)]).transition(0, 1, &[(1, 1.0)]);
        b.transition(1, 0, &[(2, 1.0)]).transition(1, 1, &[(0, 1.0)]);
        let mdp = b.terminal(2).build().unwrap();
        let q = q_learning(&mdp, 2_000, StepSchedule::default(), 0.3, 1).unwrap();
        assert!(q.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn appendix_c_q_learning() {
        let mdp = env::build_appendix_c_mdp();
        let q = q_learning(&mdp, 200_000, StepSchedule::default(), 0.1, 0).unwrap();
        assert!((q.get(1, env::APPENDIX_C_LEFT) - 0.81).abs() <= 0.01);
    }

    #[test]
    fn chain5_near_greedy_td_matches_construction() {
        let mdp = env::build_chain(5, 0, 0.9).unwrap();
        let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        let built = near_greedy_construct_dag(&mdp, &v, 0.05).unwrap();
        let q_pi = svp_policy_evaluation(&mdp, &built, DEFAULT_TOLERANCE).unwrap();
        let out = near_greedy_td(&mdp, &v, &LearnConfig::new(0.05, 50_000, 1)).unwrap();
        assert!(out.policy.same_sets(&built));
        assert!(out.q.sup_distance(&q_pi) <= 0.01);
        assert!(out.trace.converged, "{}", out.trace.summary());
    }

    #[test]
    fn appendix_c_td_oscillates() {
        let mdp = env::build_appendix_c_mdp();
        let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
        let out = near_greedy_td(&mdp, &v, &LearnConfig::new(0.2, 200_000, 0)).unwrap();
        assert!(!out.trace.converged, "{}", out.trace.summary());
    }

    #[test]
    fn same_seed_same_q() {
        let mdp = env::build_cyclic_chain(4, 2, 0.9).unwrap();
        let config = LearnConfig::new(0.1, 3_000, 9);
        let a = q_based_td(&mdp, &config).unwrap();
        let b = q_based_td(&mdp, &config).unwrap();
        assert_eq!(a.q, b.q);
        assert!(LearnConfig { epsilon: 2.0, ..config }.validate().is_err());
    }
}
