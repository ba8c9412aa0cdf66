//! The `svp` command line.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 when the command itself fails.

use std::fs::File;
use std::io::{BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::env::{EnvKind, EnvSpec};
use crate::error::{Result, SvpError};
use crate::experiments::{
    render_report, run_baseline_comparison, run_convergence_grid, run_oracle_sweep, BaselineOptions, GridBudget,
    ReportFormat, Tabular, DEFAULT_GAMMAS, DEFAULT_ZETAS,
};
use crate::learn::{near_greedy_td, q_based_td, td_learn, LearnConfig, TargetRule};
use crate::metrics::{compute_metrics, SvpMetrics};
use crate::offline::{
    build_sepsis_mdp, estimate_behavior_policy, generate_sepsis_dataset, noisy_near_greedy_policy, offline_pipeline,
    ope_report, soften, Estimator, IngestOptions, OfflineConfig, OpeInputs, OpeModel, OpeReport, SepsisConfig, Split,
    SplitFractions, TrajectoryDataset, DEFAULT_BOOTSTRAP_DRAWS, DEFAULT_MIN_COUNT, DEFAULT_RECOMMENDED_MASS,
    DEFAULT_SMOOTHING, SEPSIS_BEHAVIOR_MARGIN, SEPSIS_BEHAVIOR_NOISE,
};
use crate::policy::SetValuedPolicy;
use crate::solve::{value_iteration, DEFAULT_TOLERANCE};
use crate::svp::{solve_policy, Algorithm, DEFAULT_ENUMERATION_GUARD};
use crate::TabularMdp;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "svp", version, about = "Near-optimal set-valued policies for tabular MDPs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the MDP and build an SVP from the model.
    Solve(SolveArgs),
    /// Learn an SVP from simulated experience or a logged dataset.
    Learn(LearnArgs),
    /// Compare near-greedy value iteration with the exhaustive oracle.
    Oracle(OracleArgs),
    /// Near-greedy value iteration convergence over a gamma by zeta grid.
    Grid(GridArgs),
    /// Size and worst-case ratio of every method over a zeta sweep.
    Compare(CompareArgs),
    /// Worst-case evaluation and metrics of a stored policy.
    Evaluate(EvaluateArgs),
    /// Off-policy evaluation of the softened offline SVP on logged data.
    Ope(OpeArgs),
    /// Write a synthetic sepsis-like trajectory dataset.
    Synth(SynthArgs),
    /// Serve the interactive rollout API.
    RolloutServe(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EnvArgs {
    /// chain, cyclic-chain, frozen-lake, appendix-c or random-dag.
    #[arg(long)]
    pub env: Option<String>,
    /// Environment spec JSON, or an MDP JSON file.
    #[arg(long, conflicts_with = "env")]
    pub env_file: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// 4x4 or 8x8.
    #[arg(long)]
    pub map: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub states: Option<usize>,
    #[arg(long)]
    pub actions: Option<usize>,
    /// FrozenLake step rewards for left,down,right,up.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub perturbation: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "json")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.05)]
    pub zeta: f64,
    #[arg(long, default_value = "near-greedy-vi")]
    pub algo: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long, required = true)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.05)]
    pub zeta: f64,
    /// near-greedy-td, q-based-td, q-learning or offline.
    #[arg(long, default_value = "near-greedy-td")]
    pub algo: String,
    #[arg(long, default_value_t = 200_000)]
    pub episodes: usize,
    /// Trajectory JSONL for the offline learner.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
    pub min_count: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub zetas: Option<Vec<f64>>,
    /// Largest number of candidate SVPs to enumerate.
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_GUARD)]
    pub guard: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub zetas: Option<Vec<f64>>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long, required = true)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub zetas: Option<Vec<f64>>,
    /// Episodes for the Q-based TD baseline.
    #[arg(long, default_value_t = 200_000)]
    pub episodes: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Policy JSON as written by `solve` or `learn`.
    #[arg(long)]
    pub policy: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct OpeArgs {
    /// Trajectory JSONL.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required = true)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.05)]
    pub zeta: f64,
    #[arg(long, default_value_t = 0.99)]
    pub gamma: f64,
    /// Offline training replays.
    #[arg(long, default_value_t = 200_000)]
    pub episodes: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
    pub min_count: u64,
    /// Evaluate this SVP instead of training one.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// wdr, dr, or both.
    #[arg(long, default_value = "both")]
    pub estimator: String,
    #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_DRAWS)]
    pub draws: usize,
    /// Probability mass spread over the recommended set.
    #[arg(long, default_value_t = DEFAULT_RECOMMENDED_MASS)]
    pub mass: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, required = true)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 50_000)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0.99)]
    pub gamma: f64,
    /// Seed of the generating MDP.
    #[arg(long, default_value_t = 0)]
    pub mdp_seed: u64,
    /// Also write the generating MDP as JSON.
    #[arg(long)]
    pub mdp_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Directory of static files served next to the API.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(SvpError),
}

impl From<SvpError> for CliError {
    fn from(e: SvpError) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl EnvArgs {
    fn spec(&self, seed: Option<u64>) -> CliResult<EnvSpec> {
        let mut spec = match (&self.env, &self.env_file) {
            (Some(name), None) => EnvSpec::new(EnvKind::parse(name).map_err(|e| usage(e.to_string()))?),
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path)?;
                match serde_json::from_str::<EnvSpec>(&text) {
                    Ok(spec) => spec,
                    Err(_) => EnvSpec { path: Some(path.display().to_string()), ..EnvSpec::new(EnvKind::File) },
                }
            }
            _ => return Err(usage("one of --env or --env-file is required")),
        };
        if spec.kind == EnvKind::File && self.env.is_some() {
            return Err(usage("file environments are given with --env-file"));
        }
        spec.k = self.k.or(spec.k);
        spec.map = self.map.clone().or(spec.map);
        spec.gamma = self.gamma.or(spec.gamma);
        spec.states = self.states.or(spec.states);
        spec.actions = self.actions.or(spec.actions);
        spec.seed = seed.or(spec.seed);
        if let Some(p) = &self.perturbation {
            spec.perturbation = Some([p[0], p[1], p[2], p[3]]);
        }
        if spec.kind.needs_seed() && spec.seed.is_none() {
            return Err(usage(format!("--seed is required for {:?} environments", spec.kind)));
        }
        Ok(spec)
    }
}

impl OutputArgs {
    fn format(&self) -> CliResult<ReportFormat> {
        ReportFormat::parse(&self.format).map_err(|e| usage(e.to_string()))
    }
}

fn write_output(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn check_unit(name: &str, x: f64) -> CliResult {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(usage(format!("--{name} must lie in [0, 1], got {x}")))
    }
}

fn load_dataset(path: &Path) -> CliResult<TrajectoryDataset> {
    let reader = BufReader::new(File::open(path)?);
    Ok(TrajectoryDataset::from_jsonl(reader, &IngestOptions::default())?)
}

fn solve(args: &SolveArgs) -> CliResult {
    check_unit("zeta", args.zeta)?;
    let algo = Algorithm::parse(&args.algo).map_err(|e| usage(e.to_string()))?;
    let mdp = args.env.spec(args.seed)?.build()?;
    let solved = solve_policy(&mdp, algo, args.zeta)?;
    write_output(args.out.as_deref(), &(solved.policy.to_json() + "\n"))
}

fn learn(args: &LearnArgs) -> CliResult {
    check_unit("zeta", args.zeta)?;
    let seed = args.seed.ok_or_else(|| usage("--seed is required"))?;
    let policy = if args.algo == "offline" {
        let path = args.data.as_deref().ok_or_else(|| usage("--data is required for the offline learner"))?;
        let data = load_dataset(path)?;
        let config = OfflineConfig {
            zeta: args.zeta,
            gamma: args.env.gamma.unwrap_or(OfflineConfig::default().gamma),
            episodes: args.episodes,
            seed,
            ..OfflineConfig::default()
        };
        offline_pipeline(&data, args.min_count, &config)?.near_greedy.policy
    } else {
        let mdp = args.env.spec(Some(seed))?.build()?;
        let config = LearnConfig::new(args.zeta, args.episodes, seed);
        let outcome = match args.algo.as_str() {
            "near-greedy-td" => {
                let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE)?;
                near_greedy_td(&mdp, &v.into_inner(), &config)?
            }
            "q-based-td" => q_based_td(&mdp, &config)?,
            "q-learning" => td_learn(&mdp, &TargetRule::Greedy, &config)?,
            other => return Err(usage(format!("unknown learner {other:?}"))),
        };
        if !outcome.trace.converged {
            eprintln!("warning: {}", outcome.trace.summary());
        }
        outcome.policy
    };
    write_output(args.out.as_deref(), &(policy.to_json() + "\n"))
}

fn zetas_or_default(zetas: &Option<Vec<f64>>) -> CliResult<Vec<f64>> {
    let zetas = zetas.clone().unwrap_or_else(|| DEFAULT_ZETAS.to_vec());
    for &z in &zetas {
        check_unit("zetas", z)?;
    }
    Ok(zetas)
}

fn report<T: Tabular>(result: &T, output: &OutputArgs) -> CliResult {
    let format = output.format()?;
    write_output(output.out.as_deref(), &render_report(result, format)?)
}

fn oracle(args: &OracleArgs) -> CliResult {
    let spec = args.env.spec(args.seed)?;
    let zetas = zetas_or_default(&args.zetas)?;
    args.output.format()?;
    report(&run_oracle_sweep(&spec, &zetas, Some(args.guard))?, &args.output)
}

fn grid(args: &GridArgs) -> CliResult {
    let spec = args.env.spec(args.seed)?;
    let gammas = args.gammas.clone().unwrap_or_else(|| DEFAULT_GAMMAS.to_vec());
    for &g in &gammas {
        check_unit("gammas", g)?;
    }
    let zetas = zetas_or_default(&args.zetas)?;
    args.output.format()?;
    report(&run_convergence_grid(&spec, &gammas, &zetas, GridBudget::default())?, &args.output)
}

fn compare(args: &CompareArgs) -> CliResult {
    let seed = args.seed.ok_or_else(|| usage("--seed is required"))?;
    let spec = args.env.spec(Some(seed))?;
    let zetas = zetas_or_default(&args.zetas)?;
    args.output.format()?;
    let mut options = BaselineOptions::new(seed);
    options.td.episodes = args.episodes;
    report(&run_baseline_comparison(&spec, &zetas, &options)?, &args.output)
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    source: String,
    zeta: f64,
    labels: Vec<String>,
    sets: Vec<Vec<usize>>,
    v_star: Vec<f64>,
    metrics: SvpMetrics,
}

impl Tabular for EvaluationReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["state", "label", "actions", "v_pi", "v_star", "ratio"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        (0..self.labels.len())
            .map(|s| {
                let actions: Vec<String> = self.sets[s].iter().map(|a| a.to_string()).collect();
                vec![
                    s.to_string(),
                    self.labels[s].clone(),
                    actions.join(" "),
                    format!("{:.6}", self.metrics.v_pi[s]),
                    format!("{:.6}", self.v_star[s]),
                    self.metrics.per_state_ratio[s].map(|r| format!("{r:.6}")).unwrap_or_default(),
                ]
            })
            .collect()
    }
}

fn evaluate(args: &EvaluateArgs) -> CliResult {
    args.output.format()?;
    let mdp: TabularMdp = args.env.spec(args.seed)?.build()?;
    let policy = SetValuedPolicy::from_json(&std::fs::read_to_string(&args.policy)?)?;
    policy.validate_for(&mdp)?;
    let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE)?;
    let v_star = v.into_inner();
    let metrics = compute_metrics(&mdp, &policy, &v_star)?;
    let result = EvaluationReport {
        source: policy.source.clone(),
        zeta: policy.zeta,
        labels: mdp.state_labels().to_vec(),
        sets: policy.sets().iter().map(|s| s.to_vec()).collect(),
        v_star,
        metrics,
    };
    report(&result, &args.output)
}

#[derive(Debug, Serialize)]
struct OpeSummary {
    train_episodes: usize,
    validation_episodes: usize,
    test_episodes: usize,
    average_policy_size: f64,
    reports: Vec<OpeReport>,
}

impl Tabular for OpeSummary {
    fn header(&self) -> Vec<&'static str> {
        vec!["estimator", "estimate", "mean", "stderr", "ci_lower", "ci_upper", "episodes", "usable", "ess"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.reports
            .iter()
            .map(|r| {
                vec![
                    r.estimator.name().to_string(),
                    format!("{:.6}", r.estimate),
                    format!("{:.6}", r.mean),
                    format!("{:.6}", r.stderr),
                    format!("{:.6}", r.ci_lower),
                    format!("{:.6}", r.ci_upper),
                    r.episodes.to_string(),
                    r.usable_episodes.to_string(),
                    format!("{:.6}", r.effective_sample_size),
                ]
            })
            .collect()
    }
}

fn ope(args: &OpeArgs) -> CliResult {
    let seed = args.seed.ok_or_else(|| usage("--seed is required"))?;
    check_unit("zeta", args.zeta)?;
    check_unit("gamma", args.gamma)?;
    check_unit("mass", args.mass)?;
    args.output.format()?;
    let estimators = match args.estimator.as_str() {
        "both" => vec![Estimator::Dr, Estimator::Wdr],
        name => vec![Estimator::parse(name).map_err(|e| usage(e.to_string()))?],
    };
    let data = load_dataset(&args.data)?;
    let policy = match &args.policy {
        Some(path) => SetValuedPolicy::from_json(&std::fs::read_to_string(path)?)?,
        None => {
            let config = OfflineConfig {
                zeta: args.zeta,
                gamma: args.gamma,
                episodes: args.episodes,
                seed,
                ..OfflineConfig::default()
            };
            offline_pipeline(&data, args.min_count, &config)?.near_greedy.policy
        }
    };
    if policy.state_count() != data.state_count() || policy.action_count() != data.action_count() {
        return Err(SvpError::InvalidPolicy("policy shape does not match the dataset".into()).into());
    }
    let target = soften(&policy, args.mass)?;
    let behavior = estimate_behavior_policy(&data, DEFAULT_SMOOTHING)?;
    let model = OpeModel::fit(&data, &target, args.gamma)?;
    let inputs = OpeInputs { target: &target, behavior: &behavior, model: &model, gamma: args.gamma };
    let test = data.split(Split::Test);
    let reports =
        estimators.iter().map(|&e| ope_report(e, &test, &inputs, args.draws, seed)).collect::<Result<Vec<_>>>()?;
    let (train, validation, test_len) = data.split_sizes();
    let decision: Vec<usize> = (0..data.state_count()).filter(|&s| !data.is_terminal(s)).collect();
    let size = decision.iter().map(|&s| policy.set(s).len()).sum::<usize>() as f64 / decision.len().max(1) as f64;
    let summary = OpeSummary {
        train_episodes: train,
        validation_episodes: validation,
        test_episodes: test_len,
        average_policy_size: size,
        reports,
    };
    report(&summary, &args.output)
}

fn synth(args: &SynthArgs) -> CliResult {
    let seed = args.seed.ok_or_else(|| usage("--seed is required"))?;
    check_unit("gamma", args.gamma)?;
    if args.episodes == 0 {
        return Err(usage("--episodes must be positive"));
    }
    let config = SepsisConfig { gamma: args.gamma, seed: args.mdp_seed, ..SepsisConfig::default() };
    let mdp = build_sepsis_mdp(&config)?;
    let (q, _) = value_iteration(&mdp, DEFAULT_TOLERANCE)?;
    let behavior = noisy_near_greedy_policy(&mdp, &q, SEPSIS_BEHAVIOR_MARGIN, SEPSIS_BEHAVIOR_NOISE)?;
    let data = generate_sepsis_dataset(&config, &mdp, &behavior, args.episodes, seed, SplitFractions::default())?;
    if let Some(path) = &args.mdp_out {
        std::fs::write(path, mdp.to_json() + "\n")?;
    }
    let mut bytes = Vec::new();
    data.write_jsonl(&mut bytes)?;
    write_output(args.out.as_deref(), &String::from_utf8(bytes).map_err(|e| SvpError::Internal(e.to_string()))?)
}

fn rollout_serve(args: &ServeArgs) -> CliResult {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    eprintln!("listening on http://{}", args.addr);
    runtime.block_on(crate::service::serve(args.addr, args.static_dir.clone()))?;
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Solve(a) => solve(a),
        Command::Learn(a) => learn(a),
        Command::Oracle(a) => oracle(a),
        Command::Grid(a) => grid(a),
        Command::Compare(a) => compare(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ope(a) => ope(a),
        Command::Synth(a) => synth(a),
        Command::RolloutServe(a) => rollout_serve(a),
    }
}

/// Parse `argv` (program name first), run the command and return the exit code.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `svp --help` for usage.");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
