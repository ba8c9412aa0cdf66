//! Experiment runners that emit the convergence grid, the baseline
//! comparison and the oracle sweep as CSV or JSON tables.

use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::env::EnvSpec;
use crate::error::{Result, SvpError};
use crate::learn::{q_based_td, LearnConfig};
use crate::mdp::TabularMdp;
use crate::metrics::{compute_metrics, metrics_from_values};
use crate::oracle::oracle_compare_guarded;
use crate::policy::SetValuedPolicy;
use crate::solve::{evaluate_values, value_iteration, DEFAULT_TOLERANCE};
use crate::svp::{
    additive_svp, conservative_svp, near_greedy_vi, qstar_based_svp, DEFAULT_ENUMERATION_GUARD, DEFAULT_MAX_SWEEPS,
    DEFAULT_WINDOW,
};

pub const DEFAULT_GAMMAS: [f64; 7] = [0.1, 0.3, 0.5, 0.7, 0.9, 0.95, 0.99];
pub const DEFAULT_ZETAS: [f64; 8] = [0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn parse(text: &str) -> Result<Self> {
        match text.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(SvpError::InvalidConfig(format!("unknown report format {other:?} (expected csv or json)"))),
        }
    }
}

/// A result that can be flattened into one CSV table.
pub trait Tabular: Serialize {
    fn header(&self) -> Vec<&'static str>;
    fn rows(&self) -> Vec<Vec<String>>;
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Render in memory; CSV floats carry 6 decimals, JSON keeps full precision.
pub fn render_report<T: Tabular>(result: &T, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(result)? + "\n"),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(result.header())?;
            for row in result.rows() {
                w.write_record(row)?;
            }
            let bytes = w.into_inner().map_err(|e| SvpError::Io(e.into_error()))?;
            String::from_utf8(bytes).map_err(|e| SvpError::Internal(e.to_string()))
        }
    }
}

pub fn emit_report<T: Tabular>(result: &T, path: &Path, format: ReportFormat) -> Result<()> {
    std::fs::write(path, render_report(result, format)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub gamma: f64,
    pub zeta: f64,
    pub converged: bool,
    /// Average size of the last iterate's sets, terminals included.
    pub avg_size: Option<f64>,
    pub avg_size_nonterminal: Option<f64>,
    pub sweeps: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridResult {
    pub gammas: Vec<f64>,
    pub zetas: Vec<f64>,
    /// Ordered by gamma index, then zeta index.
    pub cells: Vec<GridCell>,
    #[serde(skip)]
    pub runtime: Duration,
}

impl GridResult {
    pub fn cell(&self, gamma_index: usize, zeta_index: usize) -> &GridCell {
        &self.cells[gamma_index * self.zetas.len() + zeta_index]
    }
}

impl Tabular for GridResult {
    fn header(&self) -> Vec<&'static str> {
        vec!["gamma", "zeta", "converged", "avg_size", "avg_size_nonterminal"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.cells
            .iter()
            .map(|c| {
                vec![num(c.gamma), num(c.zeta), c.converged.to_string(), opt(c.avg_size), opt(c.avg_size_nonterminal)]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBudget {
    pub max_sweeps: usize,
    pub window: usize,
}

impl Default for GridBudget {
    fn default() -> Self {
        Self { max_sweeps: DEFAULT_MAX_SWEEPS, window: DEFAULT_WINDOW }
    }
}

fn sizes(mdp: &TabularMdp, sets: &[crate::ActionSet]) -> (f64, f64) {
    let total: usize = sets.iter().map(|s| s.len()).sum();
    let decision: Vec<usize> = (0..mdp.state_count()).filter(|&s| !mdp.is_terminal(s)).collect();
    let inner: usize = decision.iter().map(|&s| sets[s].len()).sum();
    (total as f64 / sets.len() as f64, inner as f64 / decision.len().max(1) as f64)
}

/// Convergence flag, final (avg, avg over decision states), checkpoints.
type CellRun = (bool, Option<(f64, f64)>, usize);

fn grid_cell(spec: &EnvSpec, gamma: f64, zeta: f64, budget: GridBudget) -> GridCell {
    let mut cell = GridCell {
        gamma,
        zeta,
        converged: false,
        avg_size: None,
        avg_size_nonterminal: None,
        sweeps: None,
        error: None,
    };
    let run = || -> Result<CellRun> {
        let mdp = spec.with_gamma(gamma).build()?;
        let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE)?;
        let (_, trace) = near_greedy_vi(&mdp, &v, zeta, budget.max_sweeps, budget.window)?;
        let last = trace.final_sets().map(|sets| sizes(&mdp, sets));
        Ok((trace.converged, last, trace.checkpoints()))
    };
    match run() {
        Ok((converged, last, sweeps)) => {
            cell.converged = converged;
            cell.avg_size = last.map(|l| l.0);
            cell.avg_size_nonterminal = last.map(|l| l.1);
            cell.sweeps = Some(sweeps);
        }
        Err(e) => cell.error = Some(e.to_string()),
    }
    cell
}

/// Near-greedy value iteration for every `(gamma, zeta)` pair. A failing
/// cell is recorded as not converged with its error message.
pub fn run_convergence_grid(spec: &EnvSpec, gammas: &[f64], zetas: &[f64], budget: GridBudget) -> Result<GridResult> {
    if gammas.is_empty() || zetas.is_empty() {
        return Err(SvpError::InvalidConfig("gamma and zeta lists must be non-empty".into()));
    }
    let start = Instant::now();
    let pairs: Vec<(f64, f64)> = gammas.iter().flat_map(|&g| zetas.iter().map(move |&z| (g, z))).collect();
    let cells = pairs.par_iter().map(|&(g, z)| grid_cell(spec, g, z, budget)).collect();
    Ok(GridResult { gammas: gammas.to_vec(), zetas: zetas.to_vec(), cells, runtime: start.elapsed() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    NearGreedy,
    Conservative,
    QstarBased,
    QBased,
    Additive,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::NearGreedy, Method::Conservative, Method::QstarBased, Method::QBased, Method::Additive];

    pub fn name(self) -> &'static str {
        match self {
            Method::NearGreedy => "near-greedy",
            Method::Conservative => "conservative",
            Method::QstarBased => "qstar-based",
            Method::QBased => "q-based",
            Method::Additive => "additive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineRow {
    pub zeta: f64,
    pub method: Method,
    pub avg_size: Option<f64>,
    pub avg_size_nonterminal: Option<f64>,
    pub worst_ratio: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineReport {
    pub env: EnvSpec,
    /// Ordered by zeta, then by [`Method::ALL`].
    pub rows: Vec<BaselineRow>,
}

impl BaselineReport {
    pub fn row(&self, zeta: f64, method: Method) -> Option<&BaselineRow> {
        self.rows.iter().find(|r| r.zeta == zeta && r.method == method)
    }
}

impl Tabular for BaselineReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["zeta", "method", "avg_size", "worst_ratio", "avg_size_nonterminal", "converged"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    num(r.zeta),
                    r.method.name().to_string(),
                    opt(r.avg_size),
                    opt(r.worst_ratio),
                    opt(r.avg_size_nonterminal),
                    r.converged.to_string(),
                ]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOptions {
    pub methods: Vec<Method>,
    /// Episodes, seed and exploration for the Q-based TD learner.
    pub td: LearnConfig,
}

impl BaselineOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            td: LearnConfig { exploring_starts: true, max_steps: 200, ..LearnConfig::new(0.0, 200_000, seed) },
        }
    }
}

fn baseline_row(mdp: &TabularMdp, zeta: f64, method: Method, options: &BaselineOptions) -> BaselineRow {
    let mut row = BaselineRow {
        zeta,
        method,
        avg_size: None,
        avg_size_nonterminal: None,
        worst_ratio: None,
        converged: true,
        error: None,
    };
    let run = || -> Result<(SetValuedPolicy, bool)> {
        let (q, v) = value_iteration(mdp, DEFAULT_TOLERANCE)?;
        Ok(match method {
            Method::NearGreedy => {
                let (policy, trace) = near_greedy_vi(mdp, &v, zeta, DEFAULT_MAX_SWEEPS, DEFAULT_WINDOW)?;
                match policy {
                    Some(p) => (p, true),
                    None => {
                        let sets = trace.final_sets().ok_or_else(|| SvpError::Internal("empty trace".into()))?;
                        (SetValuedPolicy::new(sets.to_vec(), mdp.action_count(), zeta, "near-greedy-vi")?, false)
                    }
                }
            }
            Method::Conservative => (conservative_svp(mdp, &v, zeta)?, true),
            Method::QstarBased => (qstar_based_svp(mdp, &q, zeta)?, true),
            Method::Additive => (additive_svp(mdp, &q, &v, zeta)?, true),
            Method::QBased => {
                let out = q_based_td(mdp, &LearnConfig { zeta, ..options.td.clone() })?;
                (out.policy, out.trace.converged)
            }
        })
    };
    let evaluated = run().and_then(|(policy, converged)| {
        let (_, v) = value_iteration(mdp, DEFAULT_TOLERANCE)?;
        let v_pi = evaluate_values(mdp, &policy, DEFAULT_TOLERANCE)?;
        Ok((metrics_from_values(mdp, &policy, &v_pi, &v), converged))
    });
    match evaluated {
        Ok((m, converged)) => {
            row.avg_size = Some(m.average_policy_size);
            row.avg_size_nonterminal = Some(m.average_policy_size_nonterminal);
            row.worst_ratio = m.worst_case_ratio;
            row.converged = converged;
        }
        Err(e) => {
            row.converged = false;
            row.error = Some(e.to_string());
        }
    }
    row
}

/// Every method at every zeta. Failures are recorded per row.
pub fn run_baseline_comparison(spec: &EnvSpec, zetas: &[f64], options: &BaselineOptions) -> Result<BaselineReport> {
    if zetas.is_empty() {
        return Err(SvpError::InvalidConfig("zeta list must be non-empty".into()));
    }
    let mdp = spec.build()?;
    value_iteration(&mdp, DEFAULT_TOLERANCE)?;
    let jobs: Vec<(f64, Method)> = zetas.iter().flat_map(|&z| options.methods.iter().map(move |&m| (z, m))).collect();
    let rows = jobs.par_iter().map(|&(z, m)| baseline_row(&mdp, z, m, options)).collect();
    Ok(BaselineReport { env: spec.clone(), rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub zeta: f64,
    pub near_greedy_converged: bool,
    pub near_greedy_average: Option<f64>,
    pub oracle_average: f64,
    pub near_greedy_size: Option<usize>,
    pub oracle_size: usize,
    pub near_greedy_feasible: Option<bool>,
    pub oracle_ratio: Option<f64>,
    pub identical: bool,
    pub search_space: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleSweep {
    pub env: EnvSpec,
    pub rows: Vec<OracleRow>,
}

impl Tabular for OracleSweep {
    fn header(&self) -> Vec<&'static str> {
        vec![
            "zeta",
            "near_greedy_converged",
            "near_greedy_avg_size",
            "oracle_avg_size",
            "near_greedy_size",
            "oracle_size",
            "near_greedy_feasible",
            "oracle_ratio",
            "identical",
        ]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let flag = |b: Option<bool>| b.map(|b| b.to_string()).unwrap_or_default();
        self.rows
            .iter()
            .map(|r| {
                vec![
                    num(r.zeta),
                    r.near_greedy_converged.to_string(),
                    opt(r.near_greedy_average),
                    num(r.oracle_average),
                    r.near_greedy_size.map(|s| s.to_string()).unwrap_or_default(),
                    r.oracle_size.to_string(),
                    flag(r.near_greedy_feasible),
                    opt(r.oracle_ratio),
                    r.identical.to_string(),
                ]
            })
            .collect()
    }
}

/// Near-greedy value iteration against the exhaustive oracle at each zeta.
pub fn run_oracle_sweep(spec: &EnvSpec, zetas: &[f64], guard: Option<f64>) -> Result<OracleSweep> {
    let mdp = spec.build()?;
    let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE)?;
    let guard = guard.unwrap_or(DEFAULT_ENUMERATION_GUARD);
    let rows = zetas
        .iter()
        .map(|&zeta| {
            let c = oracle_compare_guarded(&mdp, &v, zeta, guard)?;
            Ok(OracleRow {
                zeta,
                near_greedy_converged: c.near_greedy_converged,
                near_greedy_average: c.near_greedy_average,
                oracle_average: c.oracle_average,
                near_greedy_size: c.near_greedy_size,
                oracle_size: c.oracle_size,
                near_greedy_feasible: c.near_greedy_feasible,
                oracle_ratio: c.oracle_ratio,
                identical: c.identical,
                search_space: c.oracle.search_space_size,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OracleSweep { env: spec.clone(), rows })
}

/// Metrics of a stored policy against a freshly solved `V*`.
pub fn evaluate_policy(mdp: &TabularMdp, policy: &SetValuedPolicy) -> Result<crate::metrics::SvpMetrics> {
    policy.validate_for(mdp)?;
    let (_, v) = value_iteration(mdp, DEFAULT_TOLERANCE)?;
    compute_metrics(mdp, policy, &v)
}
