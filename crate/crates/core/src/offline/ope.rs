//! Off-policy evaluation of softened set-valued policies: doubly robust and
//! weighted doubly robust estimators with bootstrap error bars.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{Episode, Split, TrajectoryDataset};
use crate::error::{Result, SvpError};
use crate::mdp::{MdpBuilder, QTable, TabularMdp, ValueTable};
use crate::policy::SetValuedPolicy;
use crate::solve::{stop_threshold, svp_policy_evaluation, worst_case_values, DEFAULT_TOLERANCE, MAX_SWEEPS};

pub const DEFAULT_RECOMMENDED_MASS: f64 = 0.99;
pub const DEFAULT_SMOOTHING: f64 = 0.01;
pub const DEFAULT_BOOTSTRAP_DRAWS: usize = 1_000;
/// Target probability below which an observed action makes an episode unusable.
pub const DEFAULT_SUPPORT_FLOOR: f64 = 1e-6;

const ROW_TOLERANCE: f64 = 1e-9;

/// Per-state action distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticPolicy {
    probabilities: Vec<Vec<f64>>,
}

/// A stochastic policy derived from an SVP by [`soften`].
pub type SoftenedPolicy = StochasticPolicy;

impl StochasticPolicy {
    pub fn new(probabilities: Vec<Vec<f64>>) -> Result<Self> {
        let m = probabilities.first().map_or(0, Vec::len);
        if m == 0 {
            return Err(SvpError::InvalidPolicy("stochastic policy needs states and actions".into()));
        }
        for (s, row) in probabilities.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if row.len() != m || row.iter().any(|p| !(0.0..=1.0 + ROW_TOLERANCE).contains(p)) {
                return Err(SvpError::InvalidPolicy(format!("row {s} is not a distribution over {m} actions")));
            }
            if (total - 1.0).abs() > ROW_TOLERANCE {
                return Err(SvpError::InvalidPolicy(format!("row {s} sums to {total}")));
            }
        }
        Ok(Self { probabilities })
    }

    pub fn uniform(state_count: usize, action_count: usize) -> Self {
        Self { probabilities: vec![vec![1.0 / action_count as f64; action_count]; state_count] }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probabilities[s]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probabilities[s][a]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.probabilities
    }

    pub fn state_count(&self) -> usize {
        self.probabilities.len()
    }

    pub fn action_count(&self) -> usize {
        self.probabilities[0].len()
    }

    /// `sum_a pi(a|s) q(s, a)`.
    pub fn expectation(&self, s: usize, q: &[f64]) -> f64 {
        self.probabilities[s].iter().zip(q).map(|(p, v)| p * v).sum()
    }
}

/// Spread `mass` uniformly over `pi(s)` and the rest uniformly over the other
/// actions. A state whose set holds every action gets the uniform row.
pub fn soften(svp: &SetValuedPolicy, mass: f64) -> Result<SoftenedPolicy> {
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(SvpError::InvalidConfig(format!("recommended mass {mass} must lie in (0, 1]")));
    }
    let m = svp.action_count();
    let rows = svp
        .sets()
        .iter()
        .map(|set| {
            let k = set.len();
            if k == m {
                return vec![1.0 / m as f64; m];
            }
            let (inside, outside) = (mass / k as f64, (1.0 - mass) / (m - k) as f64);
            (0..m).map(|a| if set.contains(a) { inside } else { outside }).collect()
        })
        .collect();
    StochasticPolicy::new(rows)
}

/// Smoothed empirical action frequencies from the training split:
/// `(c(s,a) + lambda) / (n(s) + lambda |A|)`, uniform at unseen states.
pub fn estimate_behavior_policy(data: &TrajectoryDataset, lambda: f64) -> Result<StochasticPolicy> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(SvpError::InvalidConfig(format!("smoothing {lambda} must be non-negative")));
    }
    if data.split_sizes().0 == 0 {
        return Err(SvpError::Dataset("training split is empty".into()));
    }
    let m = data.action_count();
    let rows = (0..data.state_count())
        .map(|s| {
            let counts = data.counts(s);
            let total: u64 = counts.iter().sum();
            if total == 0 {
                return vec![1.0 / m as f64; m];
            }
            let denom = total as f64 + lambda * m as f64;
            counts.iter().map(|&c| (c as f64 + lambda) / denom).collect()
        })
        .collect();
    StochasticPolicy::new(rows)
}

/// Exact `Q` and `V` of a stochastic policy by iterative evaluation.
pub fn exact_policy_value(mdp: &TabularMdp, policy: &StochasticPolicy) -> Result<(QTable, ValueTable)> {
    if policy.state_count() != mdp.state_count() || policy.action_count() != mdp.action_count() {
        return Err(SvpError::InvalidPolicy("policy shape does not match the MDP".into()));
    }
    let values = |q: &QTable| -> Vec<f64> {
        (0..mdp.state_count()).map(|s| if mdp.is_terminal(s) { 0.0 } else { policy.expectation(s, q.row(s)) }).collect()
    };
    let mut q = QTable::for_mdp(mdp);
    let mut delta = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        let v = values(&q);
        let mut next = QTable::for_mdp(mdp);
        for s in (0..mdp.state_count()).filter(|&s| !mdp.is_terminal(s)) {
            for a in 0..mdp.action_count() {
                next.set(s, a, mdp.backup(s, a, &v));
            }
        }
        delta = next.sup_distance(&q);
        q = next;
        if delta <= stop_threshold(DEFAULT_TOLERANCE, mdp.gamma(), q.sup_norm()) {
            let v = values(&q);
            return Ok((q, ValueTable(v)));
        }
    }
    Err(SvpError::NotConverged { what: "stochastic policy evaluation", iterations: MAX_SWEEPS, delta })
}

/// `mu^T V` for a stochastic policy.
pub fn exact_start_value(mdp: &TabularMdp, policy: &StochasticPolicy) -> Result<f64> {
    let (_, v) = exact_policy_value(mdp, policy)?;
    Ok(mdp.start_distribution().iter().zip(v.iter()).map(|(p, v)| p * v).sum())
}

/// Maximum-likelihood MDP from the training split with one extra absorbing
/// sink (the last state). Terminating steps and unseen pairs lead to the sink.
pub fn empirical_mdp(data: &TrajectoryDataset, gamma: f64) -> Result<TabularMdp> {
    let (n, m) = (data.state_count(), data.action_count());
    let sink = n;
    let mut next_counts = vec![vec![0u64; n + 1]; n * m];
    let mut reward_sum = vec![0.0; n * m];
    let mut start = vec![0.0; n + 1];
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(SvpError::Dataset("training split is empty".into()));
    }
    for ep in &train {
        start[ep.steps[0].s] += 1.0 / train.len() as f64;
        for t in &ep.steps {
            let k = t.s * m + t.a;
            next_counts[k][if t.done { sink } else { t.sp }] += 1;
            reward_sum[k] += t.r;
        }
    }
    let mut b = MdpBuilder::new(n + 1, m, gamma);
    b.terminal(sink).start(start);
    for s in 0..n {
        if data.is_terminal(s) {
            b.terminal(s);
            continue;
        }
        for a in 0..m {
            let row = &next_counts[s * m + a];
            let total: u64 = row.iter().sum();
            if total == 0 {
                b.transition(s, a, &[(sink, 1.0)]);
                continue;
            }
            let next: Vec<(usize, f64)> =
                row.iter().enumerate().filter(|(_, &c)| c > 0).map(|(sp, &c)| (sp, c as f64 / total as f64)).collect();
            b.transition(s, a, &next).reward(s, a, reward_sum[s * m + a] / total as f64);
        }
    }
    b.build()
}

/// Model values used as control variates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeModel {
    pub q: QTable,
    pub v: Vec<f64>,
}

impl OpeModel {
    pub fn new(q: QTable, v: Vec<f64>) -> Result<Self> {
        if q.state_count() != v.len() {
            return Err(SvpError::InvalidConfig("model Q and V disagree on the state count".into()));
        }
        Ok(Self { q, v })
    }

    /// Exact values of `target` on a known MDP.
    pub fn exact(mdp: &TabularMdp, target: &StochasticPolicy) -> Result<Self> {
        let (q, v) = exact_policy_value(mdp, target)?;
        Self::new(q, v.into_inner())
    }

    /// Worst-case values of the SVP itself.
    pub fn worst_case(mdp: &TabularMdp, svp: &SetValuedPolicy) -> Result<Self> {
        let q = svp_policy_evaluation(mdp, svp, DEFAULT_TOLERANCE)?;
        let v = worst_case_values(mdp, svp, &q).into_inner();
        Self::new(q, v)
    }

    /// Values of `target` on the empirical MDP of the training split.
    pub fn fit(data: &TrajectoryDataset, target: &StochasticPolicy, gamma: f64) -> Result<Self> {
        let mdp = empirical_mdp(data, gamma)?;
        let m = data.action_count();
        let mut rows = target.rows().to_vec();
        rows.push(vec![1.0 / m as f64; m]);
        let (q, v) = exact_policy_value(&mdp, &StochasticPolicy::new(rows)?)?;
        let n = data.state_count();
        let q = QTable::from_rows(&q.rows()[..n])?;
        Self::new(q, v[..n].to_vec())
    }
}

/// Everything the estimators need besides the episodes.
#[derive(Debug, Clone, Copy)]
pub struct OpeInputs<'a> {
    pub target: &'a StochasticPolicy,
    pub behavior: &'a StochasticPolicy,
    pub model: &'a OpeModel,
    pub gamma: f64,
}

impl OpeInputs<'_> {
    fn ratio(&self, s: usize, a: usize) -> Result<f64> {
        let b = self.behavior.prob(s, a);
        if b <= 0.0 {
            return Err(SvpError::Dataset(format!("behavior probability of action {a} at state {s} is zero")));
        }
        Ok(self.target.prob(s, a) / b)
    }
}

/// Per-episode doubly robust value, computed backwards:
/// `v_t = V(s_t) + rho_t (r_t + gamma v_{t+1} - Q(s_t, a_t))`.
pub fn dr_episode(episode: &Episode, inputs: &OpeInputs) -> Result<f64> {
    let mut v = 0.0;
    for t in episode.steps.iter().rev() {
        let rho = inputs.ratio(t.s, t.a)?;
        v = inputs.model.v[t.s] + rho * (t.r + inputs.gamma * v - inputs.model.q.get(t.s, t.a));
    }
    Ok(v)
}

pub fn ope_dr(episodes: &[&Episode], inputs: &OpeInputs) -> Result<f64> {
    if episodes.is_empty() {
        return Err(SvpError::Dataset("no episodes to evaluate".into()));
    }
    let total = episodes.iter().map(|e| dr_episode(e, inputs)).sum::<Result<f64>>()?;
    Ok(total / episodes.len() as f64)
}

/// Cumulative importance ratios per episode and step.
fn cumulative_weights(episodes: &[&Episode], inputs: &OpeInputs) -> Result<Vec<Vec<f64>>> {
    episodes
        .iter()
        .map(|e| {
            let mut w = 1.0;
            e.steps
                .iter()
                .map(|t| {
                    w *= inputs.ratio(t.s, t.a)?;
                    Ok(w)
                })
                .collect()
        })
        .collect()
}

/// Weighted doubly robust estimate with per-step self-normalized weights.
/// Finished episodes keep their last cumulative weight in later normalizers.
pub fn ope_wdr(episodes: &[&Episode], inputs: &OpeInputs) -> Result<f64> {
    if episodes.is_empty() {
        return Err(SvpError::Dataset("no episodes to evaluate".into()));
    }
    let weights = cumulative_weights(episodes, inputs)?;
    let horizon = episodes.iter().map(|e| e.steps.len()).max().unwrap_or(0);
    let at = |i: usize, t: usize| weights[i][t.min(weights[i].len() - 1)];
    let normalizers: Vec<f64> = (0..horizon).map(|t| (0..episodes.len()).map(|i| at(i, t)).sum()).collect();
    let normalized = |i: usize, t: usize| {
        let z = normalizers[t];
        if z > 0.0 {
            at(i, t) / z
        } else {
            0.0
        }
    };
    let uniform = 1.0 / episodes.len() as f64;
    let mut total = 0.0;
    for (i, ep) in episodes.iter().enumerate() {
        let mut discount = 1.0;
        for (t, step) in ep.steps.iter().enumerate() {
            let w = normalized(i, t);
            let w_prev = if t == 0 { uniform } else { normalized(i, t - 1) };
            total +=
                discount * (w * step.r - (w * inputs.model.q.get(step.s, step.a) - w_prev * inputs.model.v[step.s]));
            discount *= inputs.gamma;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Dr,
    Wdr,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Dr => "dr",
            Estimator::Wdr => "wdr",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text.to_ascii_lowercase().as_str() {
            "dr" => Ok(Estimator::Dr),
            "wdr" => Ok(Estimator::Wdr),
            other => Err(SvpError::InvalidConfig(format!("unknown estimator {other:?}"))),
        }
    }

    pub fn estimate(self, episodes: &[&Episode], inputs: &OpeInputs) -> Result<f64> {
        match self {
            Estimator::Dr => ope_dr(episodes, inputs),
            Estimator::Wdr => ope_wdr(episodes, inputs),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean: f64,
    pub stderr: f64,
    /// 2.5th percentile of the draws.
    pub lower: f64,
    /// 97.5th percentile of the draws.
    pub upper: f64,
    pub draws: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Resample episodes with replacement `draws` times. Draw `d` uses its own
/// stream of a generator seeded with `seed`, so results do not depend on
/// thread scheduling.
pub fn bootstrap_ci<F>(episodes: &[&Episode], estimator: F, draws: usize, seed: u64) -> Result<BootstrapResult>
where
    F: Fn(&[&Episode]) -> Result<f64> + Sync,
{
    if episodes.is_empty() {
        return Err(SvpError::Dataset("cannot bootstrap an empty split".into()));
    }
    if draws < 2 {
        return Err(SvpError::InvalidConfig("bootstrap needs at least two draws".into()));
    }
    let n = episodes.len();
    let mut values = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(d as u64);
            let sample: Vec<&Episode> = (0..n).map(|_| episodes[rng.random_range(0..n)]).collect();
            estimator(&sample)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = values.iter().sum::<f64>() / draws as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    values.sort_by(f64::total_cmp);
    Ok(BootstrapResult {
        mean,
        stderr: var.sqrt(),
        lower: percentile(&values, 0.025),
        upper: percentile(&values, 0.975),
        draws,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveSamples {
    pub episodes: usize,
    /// Episodes whose every logged action has target probability above the floor.
    pub usable: usize,
    /// Kish effective sample size of the final cumulative weights.
    pub ess: f64,
}

pub fn effective_samples(episodes: &[&Episode], inputs: &OpeInputs, floor: f64) -> Result<EffectiveSamples> {
    let usable = episodes.iter().filter(|e| e.steps.iter().all(|t| inputs.target.prob(t.s, t.a) > floor)).count();
    let weights = cumulative_weights(episodes, inputs)?;
    let finals: Vec<f64> = weights.iter().map(|w| *w.last().expect("episodes are non-empty")).collect();
    let sum: f64 = finals.iter().sum();
    let sum_sq: f64 = finals.iter().map(|w| w * w).sum();
    let ess = if sum_sq > 0.0 { sum * sum / sum_sq } else { 0.0 };
    Ok(EffectiveSamples { episodes: episodes.len(), usable, ess })
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeReport {
    pub estimator: Estimator,
    pub estimate: f64,
    pub mean: f64,
    pub stderr: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub episodes: usize,
    pub usable_episodes: usize,
    pub effective_sample_size: f64,
}

pub fn ope_report(
    estimator: Estimator,
    episodes: &[&Episode],
    inputs: &OpeInputs,
    draws: usize,
    seed: u64,
) -> Result<OpeReport> {
    let estimate = estimator.estimate(episodes, inputs)?;
    let boot = bootstrap_ci(episodes, |sample| estimator.estimate(sample, inputs), draws, seed)?;
    let counts = effective_samples(episodes, inputs, DEFAULT_SUPPORT_FLOOR)?;
    Ok(OpeReport {
        estimator,
        estimate,
        mean: boot.mean,
        stderr: boot.stderr,
        ci_lower: boot.lower,
        ci_upper: boot.upper,
        episodes: counts.episodes,
        usable_episodes: counts.usable,
        effective_sample_size: counts.ess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offline::dataset::{IngestOptions, SplitFractions, Step};
    use crate::policy::ActionSet;

    fn svp(sets: Vec<ActionSet>, m: usize) -> SetValuedPolicy {
        SetValuedPolicy::new(sets, m, 0.05, "t").unwrap()
    }

    #[test]
    fn soften_rules() {
        let p = soften(&svp(vec![ActionSet::singleton(0), ActionSet::full(4)], 4), 0.99).unwrap();
        assert_eq!(p.row(0)[0], 0.99);
        for a in 1..4 {
            assert!((p.row(0)[a] - 0.01 / 3.0).abs() < 1e-15);
        }
        assert_eq!(p.row(1), &[0.25; 4]);
        let pair = soften(&svp(vec![ActionSet::from_iter([0, 1])], 4), 1.0).unwrap();
        assert_eq!(pair.row(0), &[0.5, 0.5, 0.0, 0.0]);
        assert!(soften(&svp(vec![ActionSet::singleton(0)], 2), 0.0).is_err());
    }

    fn one_state_data(counts: &[usize]) -> TrajectoryDataset {
        let mut episodes = Vec::new();
        for (a, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                let id = format!("e{}", episodes.len());
                episodes.push(Episode { id, steps: vec![Step { s: 0, a, r: a as f64, sp: 2, done: true }] });
            }
        }
        let options = IngestOptions {
            state_count: Some(3),
            action_count: Some(counts.len()),
            fractions: SplitFractions { train: 1.0, validation: 0.0, test: 0.0 },
        };
        TrajectoryDataset::from_episodes(episodes, &options).unwrap()
    }

    #[test]
    fn behavior_smoothing() {
        let b = estimate_behavior_policy(&one_state_data(&[8, 2, 0, 0]), 0.0).unwrap();
        assert_eq!(b.row(0), &[0.8, 0.2, 0.0, 0.0]);
        assert_eq!(b.row(1), &[0.25; 4]);
        let s = estimate_behavior_policy(&one_state_data(&[0, 10]), 0.01).unwrap();
        assert!((s.row(0)[0] - 0.01 / 10.02).abs() < 1e-15);
        assert!((s.row(0)[1] - 10.01 / 10.02).abs() < 1e-15);
    }

    #[test]
    fn one_step_closed_form() {
        // Behavior 0.8/0.2 over rewards 0 and 1; target always takes action 1.
        let data = one_state_data(&[8, 2]);
        let episodes = data.split(Split::Train);
        let behavior = estimate_behavior_policy(&data, 0.0).unwrap();
        let target = StochasticPolicy::new(vec![vec![0.0, 1.0]; 3]).unwrap();
        let zero = OpeModel::new(QTable::zeros(3, 2), vec![0.0; 3]).unwrap();
        let inputs = OpeInputs { target: &target, behavior: &behavior, model: &zero, gamma: 0.9 };
        // Importance sampling: 2 episodes of reward 1 with ratio 5, averaged over 10.
        assert!((ope_dr(&episodes, &inputs).unwrap() - 1.0).abs() < 1e-12);
        assert!((ope_wdr(&episodes, &inputs).unwrap() - 1.0).abs() < 1e-12);

        // A model that is off by 0.5 everywhere cancels out exactly here.
        let biased = OpeModel::new(
            QTable::from_rows(&[vec![0.5, 1.5], vec![0.0; 2], vec![0.0; 2]]).unwrap(),
            vec![1.5, 0.0, 0.0],
        )
        .unwrap();
        let inputs = OpeInputs { model: &biased, ..inputs };
        assert!((ope_dr(&episodes, &inputs).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn model_fit_on_one_step_data() {
        let data = one_state_data(&[8, 2]);
        let target = StochasticPolicy::new(vec![vec![0.5, 0.5]; 3]).unwrap();
        let model = OpeModel::fit(&data, &target, 0.9).unwrap();
        assert_eq!(model.q.row(0), &[0.0, 1.0]);
        assert_eq!(model.v[0], 0.5);
        assert_eq!(model.q.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn constant_bootstrap_has_zero_stderr() {
        let data = one_state_data(&[3, 3]);
        let eps = data.split(Split::Train);
        let r = bootstrap_ci(&eps, |_| Ok(2.0), 50, 1).unwrap();
        assert_eq!((r.mean, r.stderr, r.lower, r.upper), (2.0, 0.0, 2.0, 2.0));
        let mean_return = |s: &[&Episode]| Ok(s.iter().map(|e| e.discounted_return(1.0)).sum::<f64>() / s.len() as f64);
        let a = bootstrap_ci(&eps, mean_return, 200, 7).unwrap();
        let b = bootstrap_ci(&eps, mean_return, 200, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.stderr > 0.0);
        assert!(bootstrap_ci(&[], mean_return, 10, 0).is_err());
    }

    #[test]
    fn zero_behavior_probability_is_an_error() {
        let data = one_state_data(&[4, 1]);
        let eps = data.split(Split::Train);
        let behavior = StochasticPolicy::new(vec![vec![1.0, 0.0]; 3]).unwrap();
        let target = StochasticPolicy::uniform(3, 2);
        let model = OpeModel::new(QTable::zeros(3, 2), vec![0.0; 3]).unwrap();
        let inputs = OpeInputs { target: &target, behavior: &behavior, model: &model, gamma: 1.0 };
        assert!(ope_dr(&eps, &inputs).is_err());
        assert!(ope_wdr(&eps, &inputs).is_err());
    }
}
