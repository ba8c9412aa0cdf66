//! Environment builders: Chain-k, CyclicChain-k, FrozenLake, the three-state
//! counterexample MDP, and a seeded random-DAG generator.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvpError};
use crate::mdp::{MdpBuilder, TabularMdp};

/// Candidate intermediate rewards for chain environments.
pub const CHAIN_REWARD_POOL: [f64; 6] = [0.0, 0.01, 0.02, 0.03, 0.04, 0.05];

/// Bonus paid on the transition that reaches a goal.
pub const GOAL_BONUS: f64 = 1.0;

pub const APPENDIX_C_LEFT: usize = 0;
pub const APPENDIX_C_RIGHT: usize = 1;

/// Per-state chain rewards: 4 distinct draws from [`CHAIN_REWARD_POOL`].
/// With `shared`, one draw is reused for every state.
pub fn chain_rewards(k: usize, seed: u64, shared: bool) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let mut pool = CHAIN_REWARD_POOL;
        pool.shuffle(rng);
        pool[..4].to_vec()
    };
    if shared {
        let row = draw(&mut rng);
        vec![row; k - 1]
    } else {
        (0..k - 1).map(|_| draw(&mut rng)).collect()
    }
}

fn chain_labels(k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("s{i}")).collect()
}

/// Chain with explicit per-state action rewards; `rewards.len() + 1` states,
/// the last of which is terminal. Every action moves one state to the right.
pub fn build_chain_from_rewards(rewards: &[Vec<f64>], gamma: f64) -> Result<TabularMdp> {
    let k = rewards.len() + 1;
    let actions = rewards.first().map_or(0, Vec::len);
    if k < 2 || actions == 0 || rewards.iter().any(|r| r.len() != actions) {
        return Err(SvpError::InvalidConfig("chain rewards must be a non-empty rectangular table".into()));
    }
    let mut b = MdpBuilder::new(k, actions, gamma);
    for (s, row) in rewards.iter().enumerate() {
        for (a, &r) in row.iter().enumerate() {
            b.transition(s, a, &[(s + 1, 1.0)]);
            let bonus = if s + 1 == k - 1 { GOAL_BONUS } else { 0.0 };
            b.reward(s, a, r + bonus);
        }
    }
    b.terminal(k - 1).start_state(0);
    b.state_labels(chain_labels(k));
    b.action_labels((1..=actions).map(|a| format!("a{a}")).collect());
    b.build()
}

pub fn build_chain(k: usize, reward_seed: u64, gamma: f64) -> Result<TabularMdp> {
    build_chain_with(k, reward_seed, gamma, false)
}

pub fn build_chain_with(k: usize, reward_seed: u64, gamma: f64, shared_rewards: bool) -> Result<TabularMdp> {
    if k < 2 {
        return Err(SvpError::InvalidConfig(format!("chain length {k} must be at least 2")));
    }
    build_chain_from_rewards(&chain_rewards(k, reward_seed, shared_rewards), gamma)
}

pub fn build_cyclic_chain(k: usize, reward_seed: u64, gamma: f64) -> Result<TabularMdp> {
    build_cyclic_chain_with(k, reward_seed, gamma, false)
}

/// Actions 0 and 1 step left (self-loop at `s1`), actions 2 and 3 step right.
pub fn build_cyclic_chain_with(k: usize, reward_seed: u64, gamma: f64, shared_rewards: bool) -> Result<TabularMdp> {
    if k < 2 {
        return Err(SvpError::InvalidConfig(format!("chain length {k} must be at least 2")));
    }
    if gamma >= 1.0 {
        return Err(SvpError::InvalidConfig("cyclic chains need gamma < 1".into()));
    }
    let rewards = chain_rewards(k, reward_seed, shared_rewards);
    let mut b = MdpBuilder::new(k, 4, gamma);
    for (s, row) in rewards.iter().enumerate() {
        for (a, &r) in row.iter().enumerate() {
            let next = if a < 2 { s.saturating_sub(1) } else { s + 1 };
            b.transition(s, a, &[(next, 1.0)]);
            let bonus = if next == k - 1 { GOAL_BONUS } else { 0.0 };
            b.reward(s, a, r + bonus);
        }
    }
    b.terminal(k - 1).start_state(0);
    b.state_labels(chain_labels(k));
    b.action_labels(vec!["left1".into(), "left2".into(), "right1".into(), "right2".into()]);
    b.build()
}

const LAKE_4X4: [&str; 4] = ["SFFF", "FHFH", "FFFH", "HFFG"];
const LAKE_8X8: [&str; 8] =
    ["SFFFFFFF", "FFFFFFFF", "FFFHFFFF", "FFFFFHFF", "FFFHFFFF", "FHHFFFHF", "FHFFHFHF", "FFFHFFFG"];

/// Action order for FrozenLake.
pub const LAKE_ACTIONS: [&str; 4] = ["left", "down", "right", "up"];

/// Grid layout of a standard map, one string per row.
pub fn lake_layout(map_name: &str) -> Result<&'static [&'static str]> {
    match map_name {
        "4x4" => Ok(&LAKE_4X4),
        "8x8" => Ok(&LAKE_8X8),
        other => Err(SvpError::InvalidConfig(format!("unknown FrozenLake map {other:?}"))),
    }
}

/// Default per-action perturbation rewards in (left, down, right, up) order.
pub fn lake_perturbations(map_name: &str) -> Result<[f64; 4]> {
    match map_name {
        "4x4" => Ok([0.01, 0.02, 0.03, 0.04]),
        "8x8" => Ok([0.001, 0.002, 0.003, 0.004]),
        other => Err(SvpError::InvalidConfig(format!("unknown FrozenLake map {other:?}"))),
    }
}

pub fn build_frozen_lake(map_name: &str, gamma: f64) -> Result<TabularMdp> {
    build_frozen_lake_with(map_name, gamma, lake_perturbations(map_name)?)
}

/// Deterministic FrozenLake. Holes and the goal are terminal; moves off the
/// grid stay in place and still pay the action's perturbation reward.
pub fn build_frozen_lake_with(map_name: &str, gamma: f64, perturbation: [f64; 4]) -> Result<TabularMdp> {
    let layout = lake_layout(map_name)?;
    let rows = layout.len();
    let cols = layout[0].len();
    let tile = |r: usize, c: usize| layout[r].as_bytes()[c];
    let n = rows * cols;
    let mut b = MdpBuilder::new(n, 4, gamma);
    let mut start = 0;
    for r in 0..rows {
        for c in 0..cols {
            let s = r * cols + c;
            match tile(r, c) {
                b'H' | b'G' => {
                    b.terminal(s);
                    continue;
                }
                b'S' => start = s,
                _ => {}
            }
            for (a, &bonus) in perturbation.iter().enumerate() {
                let (nr, nc) = match a {
                    0 => (r, c.saturating_sub(1)),
                    1 => ((r + 1).min(rows - 1), c),
                    2 => (r, (c + 1).min(cols - 1)),
                    _ => (r.saturating_sub(1), c),
                };
                let next = nr * cols + nc;
                b.transition(s, a, &[(next, 1.0)]);
                let goal = if tile(nr, nc) == b'G' { GOAL_BONUS } else { 0.0 };
                b.reward(s, a, bonus + goal);
            }
        }
    }
    b.start_state(start);
    b.state_labels(
        (0..n).map(|s| format!("({},{}){}", s / cols, s % cols, tile(s / cols, s % cols) as char)).collect(),
    );
    b.action_labels(LAKE_ACTIONS.iter().map(|s| s.to_string()).collect());
    b.build()
}

/// Three-state MDP with no near-greedy fixed point at `gamma = 0.9, zeta = 0.2`.
///
/// `s1`: R -> s2 (0), L -> T (0); `s2`: R -> T (1), L -> s1 (0).
pub fn build_appendix_c_mdp() -> TabularMdp {
    let (l, r) = (APPENDIX_C_LEFT, APPENDIX_C_RIGHT);
    let mut b = MdpBuilder::new(3, 2, 0.9);
    b.transition(0, r, &[(1, 1.0)]).reward(0, r, 0.0);
    b.transition(0, l, &[(2, 1.0)]).reward(0, l, 0.0);
    b.transition(1, r, &[(2, 1.0)]).reward(1, r, 1.0);
    b.transition(1, l, &[(0, 1.0)]).reward(1, l, 0.0);
    b.terminal(2).start_state(0);
    b.state_labels(vec!["s1".into(), "s2".into(), "T".into()]);
    b.action_labels(vec!["L".into(), "R".into()]);
    b.build().expect("fixed MDP is valid")
}

/// Seeded random DAG: states are topologically ordered by index, the last
/// state is terminal, and each `(s, a)` moves to 1-3 later states with
/// rewards drawn uniformly from `[0, 1)`.
pub fn build_random_dag(state_count: usize, action_count: usize, seed: u64, gamma: f64) -> Result<TabularMdp> {
    if state_count < 2 || action_count < 2 {
        return Err(SvpError::InvalidConfig("random DAGs need at least 2 states and 2 actions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terminal = state_count - 1;
    let mut b = MdpBuilder::new(state_count, action_count, gamma);
    for s in 0..terminal {
        let later: Vec<usize> = (s + 1..state_count).collect();
        for a in 0..action_count {
            let fanout = rng.random_range(1..=3usize).min(later.len());
            let targets: Vec<usize> = later.choose_multiple(&mut rng, fanout).copied().collect();
            let weights: Vec<f64> = targets.iter().map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = weights.iter().sum();
            let next: Vec<(usize, f64)> = targets.iter().zip(&weights).map(|(&t, &w)| (t, w / total)).collect();
            b.transition(s, a, &next);
            b.reward(s, a, rng.random::<f64>());
        }
    }
    b.terminal(terminal).start_state(0);
    b.build()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Chain,
    #[serde(alias = "cyclic-chain")]
    CyclicChain,
    #[serde(alias = "frozen-lake", alias = "lake")]
    FrozenLake,
    #[serde(alias = "appendix-c")]
    AppendixC,
    #[serde(alias = "random-dag")]
    RandomDag,
    File,
}

impl EnvKind {
    pub fn parse(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.to_string()))
            .map_err(|_| SvpError::InvalidConfig(format!("unknown environment kind {name:?}")))
    }

    /// Kinds whose construction draws random numbers.
    pub fn needs_seed(self) -> bool {
        matches!(self, EnvKind::Chain | EnvKind::CyclicChain | EnvKind::RandomDag)
    }
}

/// Declarative environment description accepted by the CLI and the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub shared_rewards: bool,
    /// FrozenLake per-action rewards in (left, down, right, up) order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

pub const DEFAULT_GAMMA: f64 = 0.9;

impl EnvSpec {
    pub fn new(kind: EnvKind) -> Self {
        Self {
            kind,
            k: None,
            map: None,
            seed: None,
            gamma: None,
            states: None,
            actions: None,
            shared_rewards: false,
            perturbation: None,
            path: None,
        }
    }

    pub fn chain(k: usize, seed: u64, gamma: f64) -> Self {
        Self { k: Some(k), seed: Some(seed), gamma: Some(gamma), ..Self::new(EnvKind::Chain) }
    }

    pub fn cyclic_chain(k: usize, seed: u64, gamma: f64) -> Self {
        Self { k: Some(k), seed: Some(seed), gamma: Some(gamma), ..Self::new(EnvKind::CyclicChain) }
    }

    pub fn frozen_lake(map: &str, gamma: f64) -> Self {
        Self { map: Some(map.to_string()), gamma: Some(gamma), ..Self::new(EnvKind::FrozenLake) }
    }

    pub fn appendix_c() -> Self {
        Self::new(EnvKind::AppendixC)
    }

    pub fn random_dag(states: usize, actions: usize, seed: u64, gamma: f64) -> Self {
        Self {
            states: Some(states),
            actions: Some(actions),
            seed: Some(seed),
            gamma: Some(gamma),
            ..Self::new(EnvKind::RandomDag)
        }
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self { gamma: Some(gamma), ..self.clone() }
    }

    fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| SvpError::InvalidConfig(format!("{:?} environments require a reward seed", self.kind)))
    }

    fn gamma_or_default(&self) -> f64 {
        self.gamma.unwrap_or(DEFAULT_GAMMA)
    }

    pub fn build(&self) -> Result<TabularMdp> {
        let gamma = self.gamma_or_default();
        match self.kind {
            EnvKind::Chain => build_chain_with(self.k.unwrap_or(5), self.seed()?, gamma, self.shared_rewards),
            EnvKind::CyclicChain => {
                build_cyclic_chain_with(self.k.unwrap_or(5), self.seed()?, gamma, self.shared_rewards)
            }
            EnvKind::FrozenLake => {
                let map = self.map.as_deref().unwrap_or("4x4");
                match self.perturbation {
                    Some(p) => build_frozen_lake_with(map, gamma, p),
                    None => build_frozen_lake(map, gamma),
                }
            }
            EnvKind::AppendixC => {
                let mdp = build_appendix_c_mdp();
                match self.gamma {
                    Some(g) => mdp.with_gamma(g),
                    None => Ok(mdp),
                }
            }
            EnvKind::RandomDag => {
                build_random_dag(self.states.unwrap_or(6), self.actions.unwrap_or(3), self.seed()?, gamma)
            }
            EnvKind::File => {
                let path = self
                    .path
                    .as_deref()
                    .ok_or_else(|| SvpError::InvalidConfig("file environments need a path".into()))?;
                let mdp = TabularMdp::from_json(&std::fs::read_to_string(path)?)?;
                match self.gamma {
                    Some(g) => mdp.with_gamma(g),
                    None => Ok(mdp),
                }
            }
        }
    }
}
