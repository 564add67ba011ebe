//! Command-line front end for the model-learning library: data generation,
//! state discovery, observation and transition estimation, sample-size
//! calculation, planning, policy evaluation, bound verification, and a
//! pipeline command chaining the learning stages end to end.
//!
//! Every subcommand accepts `--config <json>` whose keys mirror the long
//! flag names; explicit flags override the file. Every JSON output embeds
//! the tool version and the fully resolved configuration (seeds included),
//! so re-running a recorded config reproduces the outputs byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use pomdp_learn_core::bnp::{
    default_hyperparams, fit_bphmm, match_states, BpHmmHyperparams, FitConfig,
};
use pomdp_learn_core::bounds::{verify_theorem1, verify_theorem2, BoundsConfig, Theorem};
use pomdp_learn_core::formats::{
    policy_from_json, policy_to_json, read_labels_file, read_time_series_file, write_labels_file,
    write_time_series_file, LabelSeries,
};
use pomdp_learn_core::model::{deserialize_model, serialize_model, validate_model};
use pomdp_learn_core::obsfn::{estimate_observation_matrix, ObservationMatrix};
use pomdp_learn_core::planner::{
    evaluate_policy_exact, solve_optimal_dp, solve_optimal_enum, PlannerLimits,
};
use pomdp_learn_core::simgen::{driver_like_scenario, simulate_continuous, simulate_discrete, GroundTruthScenario};
use pomdp_learn_core::transest::{
    count_transitions, estimate_transitions, required_samples, required_samples_exact,
    confidence_of, CoverageReport,
};
use pomdp_learn_core::{GaussianEmission, PomdpModel, PolicyTree, TimeSeries};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Wording printed wherever transition guarantees are reported: the bound
/// covers each matrix entry separately.
pub const PER_ENTRY_NOTE: &str = "the sample-size guarantee applies to each transition entry \
separately; no union bound across entries or state-action pairs is applied";

#[derive(Parser)]
#[command(
    name = "pomdp-learn",
    version,
    about = "Learn POMDP models from continuous multivariate time series"
)]
struct Cli {
    /// Worker threads for parallel stages (0 keeps the library default).
    /// Results are independent of this setting.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Print resolved configurations and extra progress detail.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate time series from a ground-truth scenario.
    GenData(GenDataArgs),
    /// Discover shared hidden states across sequences by MCMC.
    LearnStates(LearnStatesArgs),
    /// Estimate the discrete observation matrix from learned emissions.
    ObsMatrix(ObsMatrixArgs),
    /// Estimate transition matrices from labeled sequences.
    EstimateTrans(EstimateTransArgs),
    /// Samples needed per state-action pair for a target accuracy.
    SampleSize(SampleSizeArgs),
    /// Compute an optimal finite-horizon policy for a model.
    Plan(PlanArgs),
    /// Evaluate a policy on a model, exactly and by simulation.
    Evaluate(EvaluateArgs),
    /// Empirically verify the optimality-loss bounds.
    VerifyBounds(VerifyBoundsArgs),
    /// Run the full learning pipeline on a synthetic scenario.
    Pipeline(PipelineArgs),
}

/// Entry point used by the binary and by tests: parses argv, runs the
/// subcommand, and maps outcomes to exit codes (0 success, 1 usage or
/// input error, 2 bound or acceptance failure).
pub fn run(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads > 0 {
        // The pool can only be installed once per process; later calls keep
        // the existing pool, which is harmless since results are
        // thread-count independent.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let verbose = cli.verbose;
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a, verbose),
        Command::LearnStates(a) => learn_states(a, verbose),
        Command::ObsMatrix(a) => obs_matrix(a, verbose),
        Command::EstimateTrans(a) => estimate_trans(a, verbose),
        Command::SampleSize(a) => sample_size(a),
        Command::Plan(a) => plan(a, verbose),
        Command::Evaluate(a) => evaluate(a, verbose),
        Command::VerifyBounds(a) => verify_bounds(a, verbose),
        Command::Pipeline(a) => pipeline(a, verbose),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating directory {}", path.display()))
}

fn print_config<T: Serialize>(verbose: bool, config: &T) {
    if verbose {
        println!(
            "resolved config: {}",
            serde_json::to_string(config).expect("config serializes")
        );
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Args)]
struct GenDataArgs {
    /// JSON config mirroring the flags; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ground-truth scenario JSON (defaults to the bundled benchmark).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Number of sequences to simulate.
    #[arg(long)]
    sequences: Option<usize>,
    /// Samples per sequence.
    #[arg(long)]
    length: Option<usize>,
    /// Simulation seed; sequence i draws from substream (seed, i).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for data.csv and truth.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub scenario: Option<PathBuf>,
    pub sequences: usize,
    pub length: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            scenario: None,
            sequences: 4,
            length: 500,
            seed: 0,
            out: None,
        }
    }
}

/// Ground truth record written alongside generated data.
#[derive(Serialize, Deserialize)]
pub struct TruthDoc {
    pub version: String,
    pub config: GenDataConfig,
    pub scenario: GroundTruthScenario,
}

fn load_scenario(path: &Option<PathBuf>) -> Result<GroundTruthScenario> {
    let scenario: GroundTruthScenario = match path {
        Some(p) => read_json(p)?,
        None => driver_like_scenario(),
    };
    scenario
        .validate()
        .with_context(|| "scenario failed validation".to_string())?;
    Ok(scenario)
}

fn gen_data(args: GenDataArgs, verbose: bool) -> Result<i32> {
    let mut cfg: GenDataConfig = load_config(&args.config)?;
    cfg.scenario = args.scenario.or(cfg.scenario);
    cfg.sequences = args.sequences.unwrap_or(cfg.sequences);
    cfg.length = args.length.unwrap_or(cfg.length);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.out = args.out.or(cfg.out);
    print_config(verbose, &cfg);

    let out = cfg.out.clone().context("--out directory is required")?;
    let scenario = load_scenario(&cfg.scenario)?;
    let data = simulate_continuous(&scenario, cfg.sequences, cfg.length, cfg.seed)?;
    ensure_dir(&out)?;
    write_time_series_file(&out.join("data.csv"), &data)?;
    write_json(
        &out.join("truth.json"),
        &TruthDoc {
            version: VERSION.into(),
            config: cfg.clone(),
            scenario,
        },
    )?;
    println!(
        "wrote {} sequences x {} samples (seed {}) to {}",
        cfg.sequences,
        cfg.length,
        cfg.seed,
        out.display()
    );
    Ok(0)
}

// ------------------------------------------------------------ learn-states

#[derive(Args)]
struct LearnStatesArgs {
    /// JSON config mirroring the flags; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input time-series CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Total MCMC sweeps.
    #[arg(long)]
    sweeps: Option<usize>,
    /// Sweeps discarded before retaining samples (default: half).
    #[arg(long)]
    burn_in: Option<usize>,
    /// MCMC seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Autoregressive order of the emission model.
    #[arg(long)]
    ar_order: Option<usize>,
    /// New-state generation mass of the feature prior.
    #[arg(long)]
    mass: Option<f64>,
    /// Dirichlet concentration of transition rows.
    #[arg(long)]
    gamma: Option<f64>,
    /// Extra sticky self-transition mass.
    #[arg(long)]
    kappa: Option<f64>,
    /// Prior observation count scaling the emission mean prior.
    #[arg(long)]
    prior_scale: Option<f64>,
    /// Output directory for posterior.json and labels.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    pub data: Option<PathBuf>,
    pub sweeps: usize,
    pub burn_in: Option<usize>,
    pub seed: u64,
    pub ar_order: usize,
    pub mass: Option<f64>,
    pub gamma: Option<f64>,
    pub kappa: Option<f64>,
    pub prior_scale: Option<f64>,
    pub out: Option<PathBuf>,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            data: None,
            sweeps: 600,
            burn_in: None,
            seed: 0,
            ar_order: 0,
            mass: None,
            gamma: None,
            kappa: None,
            prior_scale: None,
            out: None,
        }
    }
}

/// The retained draw with the highest joint density, in plain vectors.
#[derive(Serialize, Deserialize)]
pub struct MapSampleDoc {
    pub num_states: usize,
    pub log_joint: f64,
    pub emissions: Vec<GaussianEmission>,
    /// Which states each sequence uses, indexed [sequence][state].
    pub features: Vec<Vec<bool>>,
    /// Per-sequence transition matrices over that sequence's active states.
    pub trans_rows: Vec<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
pub struct LearnDoc {
    pub version: String,
    pub config: LearnConfig,
    pub num_states_trace: Vec<usize>,
    pub log_joint_trace: Vec<f64>,
    pub map: MapSampleDoc,
}

fn resolve_hyper(data: &[TimeSeries], cfg: &LearnConfig) -> Result<BpHmmHyperparams> {
    let mut hyper = default_hyperparams(data, cfg.ar_order)?;
    if let Some(v) = cfg.mass {
        hyper.mass = v;
    }
    if let Some(v) = cfg.gamma {
        hyper.gamma = v;
    }
    if let Some(v) = cfg.kappa {
        hyper.kappa = v;
    }
    if let Some(v) = cfg.prior_scale {
        hyper.emission_prior.scale = v;
    }
    hyper.validate()?;
    Ok(hyper)
}

fn fit_config(cfg: &LearnConfig) -> FitConfig {
    let mut fit = FitConfig::with_defaults(cfg.sweeps, cfg.seed);
    if let Some(b) = cfg.burn_in {
        fit.burn_in = b;
    }
    fit
}

fn learn_states(args: LearnStatesArgs, verbose: bool) -> Result<i32> {
    let mut cfg: LearnConfig = load_config(&args.config)?;
    cfg.data = args.data.or(cfg.data);
    cfg.sweeps = args.sweeps.unwrap_or(cfg.sweeps);
    cfg.burn_in = args.burn_in.or(cfg.burn_in);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.ar_order = args.ar_order.unwrap_or(cfg.ar_order);
    cfg.mass = args.mass.or(cfg.mass);
    cfg.gamma = args.gamma.or(cfg.gamma);
    cfg.kappa = args.kappa.or(cfg.kappa);
    cfg.prior_scale = args.prior_scale.or(cfg.prior_scale);
    cfg.out = args.out.or(cfg.out);
    print_config(verbose, &cfg);

    let data_path = cfg.data.clone().context("--data CSV is required")?;
    let out = cfg.out.clone().context("--out directory is required")?;
    let data = read_time_series_file(&data_path)?;
    let hyper = resolve_hyper(&data, &cfg)?;
    let fit = fit_bphmm(&data, &hyper, &fit_config(&cfg))?;
    let map = fit.map();

    ensure_dir(&out)?;
    write_json(
        &out.join("posterior.json"),
        &LearnDoc {
            version: VERSION.into(),
            config: cfg.clone(),
            num_states_trace: fit.num_states_trace.clone(),
            log_joint_trace: fit.log_joint_trace.clone(),
            map: MapSampleDoc {
                num_states: map.num_states,
                log_joint: map.log_joint,
                emissions: map.emissions.clone(),
                features: map.features.flags().to_vec(),
                trans_rows: map
                    .trans_rows
                    .iter()
                    .map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect())
                    .collect(),
            },
        },
    )?;
    let labels: Vec<LabelSeries> = data
        .iter()
        .zip(&map.labels)
        .map(|(series, labels)| LabelSeries {
            id: series.id.clone(),
            labels: labels.clone(),
            actions: series.actions.clone(),
        })
        .collect();
    write_labels_file(&out.join("labels.csv"), &labels)?;
    println!(
        "MAP has {} states (log joint {:.3}); wrote posterior.json and labels.csv to {}",
        map.num_states,
        map.log_joint,
        out.display()
    );
    Ok(0)
}

// -------------------------------------------------------------- obs-matrix

#[derive(Args)]
struct ObsMatrixArgs {
    /// JSON config mirroring the flags; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// posterior.json from learn-states (the MAP emissions are used).
    #[arg(long)]
    posterior: Option<PathBuf>,
    /// Monte Carlo draws per state.
    #[arg(long)]
    n_mc: Option<u64>,
    /// Monte Carlo seed; row i draws from substream (seed, i).
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ObsMatrixConfig {
    pub posterior: Option<PathBuf>,
    pub n_mc: u64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for ObsMatrixConfig {
    fn default() -> Self {
        Self {
            posterior: None,
            n_mc: 1_000_000,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct ObsMatrixDoc {
    pub version: String,
    pub config: ObsMatrixConfig,
    pub matrix: ObservationMatrix,
}

fn obs_matrix(args: ObsMatrixArgs, verbose: bool) -> Result<i32> {
    let mut cfg: ObsMatrixConfig = load_config(&args.config)?;
    cfg.posterior = args.posterior.or(cfg.posterior);
    cfg.n_mc = args.n_mc.unwrap_or(cfg.n_mc);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.out = args.out.or(cfg.out);
    print_config(verbose, &cfg);

    let posterior = cfg.posterior.clone().context("--posterior is required")?;
    let out = cfg.out.clone().context("--out path is required")?;
    let learned: LearnDoc = read_json(&posterior)?;
    let matrix = estimate_observation_matrix(&learned.map.emissions, cfg.n_mc, cfg.seed)?;
    write_json(
        &out,
        &ObsMatrixDoc {
            version: VERSION.into(),
            config: cfg.clone(),
            matrix: matrix.clone(),
        },
    )?;
    let worst = matrix
        .std_err
        .iter()
        .flatten()
        .fold(0.0f64, |m, &s| m.max(s));
    println!(
        "estimated {0}x{0} observation matrix with {1} draws per state (max std err {2:.2e}) -> {3}",
        matrix.probs.len(),
        cfg.n_mc,
        worst,
        out.display()
    );
    Ok(0)
}

// ---------------------------------------------------------- estimate-trans

#[derive(Args)]
struct EstimateTransArgs {
    /// JSON config mirroring the flags; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Labels CSV with an action column.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// State count (default: largest label + 1).
    #[arg(long)]
    num_states: Option<usize>,
    /// Action count (default: largest action + 1).
    #[arg(long)]
    num_actions: Option<usize>,
    /// Per-entry accuracy target used for the coverage report.
    #[arg(long)]
    alpha: Option<f64>,
    /// Per-entry confidence target used for the coverage report.
    #[arg(long)]
    delta: Option<f64>,
    /// Output JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateTransConfig {
    pub labels: Option<PathBuf>,
    pub num_states: Option<usize>,
    pub num_actions: Option<usize>,
    pub alpha: f64,
    pub delta: f64,
    pub out: Option<PathBuf>,
}

impl Default for EstimateTransConfig {
    fn default() -> Self {
        Self {
            labels: None,
            num_states: None,
            num_actions: None,
            alpha: 0.05,
            delta: 0.9,
            out: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct TransDoc {
    pub version: String,
    pub config: EstimateTransConfig,
    /// Estimated T(s2 | s, a), indexed [action][s][s2].
    pub transition: Vec<Vec<Vec<f64>>>,
    pub coverage: CoverageJson,
    /// Samples per state-action pair needed for (alpha, delta).
    pub required_samples: u64,
    pub guarantee_note: String,
}

/// Serializable mirror of the library coverage report.
#[derive(Serialize, Deserialize)]
pub struct CoverageJson {
    pub totals: Vec<Vec<u64>>,
    pub uniform_rows: Vec<(usize, usize)>,
    pub min_total: u64,
}

impl From<&CoverageReport> for CoverageJson {
    fn from(r: &CoverageReport) -> Self {
        Self {
            totals: r.totals.clone(),
            uniform_rows: r.uniform_rows.clone(),
            min_total: r.min_total,
        }
    }
}

fn estimate_trans(args: EstimateTransArgs, verbose: bool) -> Result<i32> {
    let mut cfg: EstimateTransConfig = load_config(&args.config)?;
    cfg.labels = args.labels.or(cfg.labels);
    cfg.num_states = args.num_states.or(cfg.num_states);
    cfg.num_actions = args.num_actions.or(cfg.num_actions);
    cfg.alpha = args.alpha.unwrap_or(cfg.alpha);
    cfg.delta = args.delta.unwrap_or(cfg.delta);
    cfg.out = args.out.or(cfg.out);
    print_config(verbose, &cfg);

    let labels_path = cfg.labels.clone().context("--labels CSV is required")?;
    let out = cfg.out.clone().context("--out path is required")?;
    let sequences = read_labels_file(&labels_path)?;
    let mut labels = Vec::with_capacity(sequences.len());
    let mut actions = Vec::with_capacity(sequences.len());
    for s in &sequences {
        let acts = s
            .actions
            .clone()
            .with_context(|| format!("sequence '{}' has no action column", s.id))?;
        labels.push(s.labels.clone());
        actions.push(acts);
    }
    let num_states = cfg.num_states.unwrap_or_else(|| {
        labels
            .iter()
            .flatten()
            .max()
            .map_or(0, |&m| m + 1)
    });
    let num_actions = cfg.num_actions.unwrap_or_else(|| {
        actions
            .iter()
            .flatten()
            .max()
            .map_or(0, |&m| m + 1)
    });
    let counts = count_transitions(&labels, &actions, num_states, num_actions)?;
    let (transition, coverage) = estimate_transitions(&counts);
    let required = required_samples(cfg.alpha, cfg.delta)?;
    write_json(
        &out,
        &TransDoc {
            version: VERSION.into(),
            config: cfg.clone(),
            transition,
            coverage: (&coverage).into(),
            required_samples: required,
            guarantee_note: PER_ENTRY_NOTE.into(),
        },
    )?;
    let ok = coverage.min_total >= required;
    println!(
        "estimated {num_states} states x {num_actions} actions; min coverage w = {} ({} required for alpha = {}, delta = {}): {}",
        coverage.min_total,
        required,
        cfg.alpha,
        cfg.delta,
        if ok { "sufficient" } else { "insufficient" },
    );
    println!("note: {PER_ENTRY_NOTE}");
    Ok(0)
}

// -------------------------------------------------------------- sample-size

#[derive(Args)]
struct SampleSizeArgs {
    /// JSON config mirroring the flags; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-entry accuracy target in (0, 1).
    #[arg(long)]
    alpha: Option<f64>,
    /// Per-entry confidence target in (0, 1).
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SampleSizeConfig {
    pub alpha: Option<f64>,
    pub delta: Option<f64>,
}

fn sample_size(args: SampleSizeArgs) -> Result<i32> {
    let cfg: SampleSizeConfig = load_config(&args.config)?;
    let alpha = args.alpha.or(cfg.alpha).context("--alpha is required")?;
    let delta = args.delta.or(cfg.delta).context("--delta is required")?;
    let w = required_samples(alpha, delta)?;
    let exact = required_samples_exact(alpha, delta)?;
    println!("required samples per state-action pair: {w}");
    println!("exact bound value: {exact:.6}");
    println!(
        "round-trip confidence at w = {w}: {:.9}",
        confidence_of(alpha, w)
    );
    if (w as f64) > exact {
        println!(
            "note: truncating the exact value gives {}, a figure sometimes quoted, but it \
             falls short of the requested confidence ({:.9}); rounding up is required",
            exact as u64,
            confidence_of(alpha, exact as u64)
        );
    }
    println!("note: {PER_ENTRY_NOTE}");
    Ok(0)
}

// --------------------------------------------------------------------- plan

#[derive(Args)]
struct PlanArgs {
    /// JSON config mirroring the flags; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model JSON path.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Planning horizon (number of rewards accrued).
    #[arg(long)]
    horizon: Option<usize>,
    /// Solver: "dp" (backward induction) or "enum" (exhaustive).
    #[arg(long)]
    solver: Option<String>,
    /// Output policy JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    pub model: Option<PathBuf>,
    pub horizon: usize,
    pub solver: String,
    pub out: Option<PathBuf>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            model: None,
            horizon: 3,
            solver: "dp".into(),
            out: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct PlanDoc {
    pub version: String,
    pub config: PlanConfig,
    pub value: f64,
    pub policy: serde_json::Value,
}

fn load_model(path: &Path) -> Result<PomdpModel> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    deserialize_model(&text).with_context(|| format!("model {}", path.display()))
}

/// Reads a policy either from a plan output document or from bare policy
/// JSON.
fn load_policy(path: &Path, model: &PomdpModel) -> Result<PolicyTree> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let policy_value = value.get("policy").unwrap_or(&value);
    policy_from_json(&policy_value.to_string(), model)
        .with_context(|| format!("policy {}", path.display()))
}

fn plan(args: PlanArgs, verbose: bool) -> Result<i32> {
    let mut cfg: PlanConfig = load_config(&args.config)?;
    cfg.model = args.model.or(cfg.model);
    cfg.horizon = args.horizon.unwrap_or(cfg.horizon);
    cfg.solver = args.solver.unwrap_or(cfg.solver);
    cfg.out = args.out.or(cfg.out);
    print_config(verbose, &cfg);

    let model_path = cfg.model.clone().context("--model is required")?;
    let model = load_model(&model_path)?;
    let limits = PlannerLimits::default();
    let (policy, value) = match cfg.solver.as_str() {
        "dp" => solve_optimal_dp(&model, cfg.horizon, &limits)?,
        "enum" => solve_optimal_enum(&model, cfg.horizon, &limits)?,
        other => bail!("unknown solver '{other}' (expected dp or enum)"),
    };
    if let Some(out) = &cfg.out {
        let policy_json: serde_json::Value =
            serde_json::from_str(&policy_to_json(&policy, &model)?)?;
        write_json(
            out,
            &PlanDoc {
                version: VERSION.into(),
                config: cfg.clone(),
                value,
                policy: policy_json,
            },
        )?;
    }
    println!(
        "optimal value over horizon {}: {:.9} ({} solver)",
        cfg.horizon, value, cfg.solver
    );
    Ok(0)
}

// ----------------------------------------------------------------- evaluate

#[derive(Args)]
struct EvaluateArgs {
    /// JSON config mirroring the flags; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model JSON path.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Policy JSON path (plan output or bare policy).
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Horizon; defaults to the policy's.
    #[arg(long)]
    horizon: Option<usize>,
    /// Monte Carlo episodes for the simulation cross-check (0 to skip).
    #[arg(long)]
    episodes: Option<u64>,
    /// Rollout seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub model: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    pub horizon: Option<usize>,
    pub episodes: u64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            model: None,
            policy: None,
            horizon: None,
            episodes: 0,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct SimulationDoc {
    pub mean: f64,
    pub std_err: f64,
    pub episodes: u64,
    pub seed: u64,
    /// Whether the exact value sits within three standard errors.
    pub within_three_se: bool,
}

#[derive(Serialize, Deserialize)]
pub struct EvaluateDoc {
    pub version: String,
    pub config: EvaluateConfig,
    pub exact_value: f64,
    pub num_sequences: u64,
    pub simulation: Option<SimulationDoc>,
}

fn evaluate(args: EvaluateArgs, verbose: bool) -> Result<i32> {
    let mut cfg: EvaluateConfig = load_config(&args.config)?;
    cfg.model = args.model.or(cfg.model);
    cfg.policy = args.policy.or(cfg.policy);
    cfg.horizon = args.horizon.or(cfg.horizon);
    cfg.episodes = args.episodes.unwrap_or(cfg.episodes);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.out = args.out.or(cfg.out);
    print_config(verbose, &cfg);

    let model_path = cfg.model.clone().context("--model is required")?;
    let policy_path = cfg.policy.clone().context("--policy is required")?;
    let model = load_model(&model_path)?;
    let policy = load_policy(&policy_path, &model)?;
    let horizon = cfg.horizon.unwrap_or(policy.horizon);
    let exact = evaluate_policy_exact(&model, &policy, horizon, &PlannerLimits::default())?;
    println!(
        "exact value over horizon {horizon}: {:.9} ({} sequences)",
        exact.value, exact.num_sequences
    );
    let simulation = if cfg.episodes > 0 {
        let (mean, std_err) = simulate_discrete(&model, &policy, horizon, cfg.episodes, cfg.seed)?;
        let within = (mean - exact.value).abs() <= 3.0 * std_err + 1e-9;
        println!(
            "simulated value over {} episodes: {:.6} +- {:.6} ({})",
            cfg.episodes,
            mean,
            std_err,
            if within {
                "consistent with exact"
            } else {
                "outside three standard errors"
            }
        );
        Some(SimulationDoc {
            mean,
            std_err,
            episodes: cfg.episodes,
            seed: cfg.seed,
            within_three_se: within,
        })
    } else {
        None
    };
    if let Some(out) = &cfg.out {
        write_json(
            out,
            &EvaluateDoc {
                version: VERSION.into(),
                config: cfg.clone(),
                exact_value: exact.value,
                num_sequences: exact.num_sequences,
                simulation,
            },
        )?;
    }
    Ok(0)
}

// ------------------------------------------------------------- verify-bounds

#[derive(Args)]
struct VerifyBoundsArgs {
    /// JSON config mirroring the flags; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which bound to verify: 1 or 2.
    #[arg(long)]
    theorem: Option<u8>,
    /// Target value gap.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Planning horizon.
    #[arg(long)]
    horizon: Option<usize>,
    /// Random instances to test.
    #[arg(long)]
    trials: Option<u64>,
    /// Seed for instance generation.
    #[arg(long)]
    seed: Option<u64>,
    /// States in each random instance.
    #[arg(long)]
    states: Option<usize>,
    /// Actions in each random instance.
    #[arg(long)]
    actions: Option<usize>,
    /// Observations in each random instance.
    #[arg(long)]
    observations: Option<usize>,
    /// Reward magnitude bound for random instances.
    #[arg(long)]
    r_max: Option<f64>,
    /// Extra random policies checked per trial (theorem 1 spot checks).
    #[arg(long)]
    random_policies: Option<usize>,
    /// Output report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyBoundsConfig {
    pub theorem: u8,
    pub epsilon: f64,
    pub horizon: usize,
    pub trials: u64,
    pub seed: u64,
    pub states: usize,
    pub actions: usize,
    pub observations: usize,
    pub r_max: f64,
    pub random_policies: usize,
    pub out: Option<PathBuf>,
}

impl Default for VerifyBoundsConfig {
    fn default() -> Self {
        Self {
            theorem: 1,
            epsilon: 0.5,
            horizon: 3,
            trials: 100,
            seed: 7,
            states: 3,
            actions: 2,
            observations: 2,
            r_max: 1.0,
            random_policies: 10,
            out: None,
        }
    }
}

#[derive(Serialize)]
pub struct BoundsDoc<'a> {
    pub version: String,
    pub config: &'a VerifyBoundsConfig,
    pub report: &'a pomdp_learn_core::bounds::BoundReport,
}

fn verify_bounds(args: VerifyBoundsArgs, verbose: bool) -> Result<i32> {
    let mut cfg: VerifyBoundsConfig = load_config(&args.config)?;
    cfg.theorem = args.theorem.unwrap_or(cfg.theorem);
    cfg.epsilon = args.epsilon.unwrap_or(cfg.epsilon);
    cfg.horizon = args.horizon.unwrap_or(cfg.horizon);
    cfg.trials = args.trials.unwrap_or(cfg.trials);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.states = args.states.unwrap_or(cfg.states);
    cfg.actions = args.actions.unwrap_or(cfg.actions);
    cfg.observations = args.observations.unwrap_or(cfg.observations);
    cfg.r_max = args.r_max.unwrap_or(cfg.r_max);
    cfg.random_policies = args.random_policies.unwrap_or(cfg.random_policies);
    cfg.out = args.out.or(cfg.out);
    print_config(verbose, &cfg);

    let theorem = match cfg.theorem {
        1 => Theorem::One,
        2 => Theorem::Two,
        other => bail!("--theorem must be 1 or 2, got {other}"),
    };
    let bounds_config = BoundsConfig {
        theorem,
        epsilon: cfg.epsilon,
        horizon: cfg.horizon,
        trials: cfg.trials,
        seed: cfg.seed,
        num_states: cfg.states,
        num_actions: cfg.actions,
        num_observations: cfg.observations,
        r_max: cfg.r_max,
        random_policies_per_trial: cfg.random_policies,
    };
    let report = match theorem {
        Theorem::One => verify_theorem1(&bounds_config)?,
        Theorem::Two => verify_theorem2(&bounds_config)?,
    };
    if let Some(out) = &cfg.out {
        write_json(
            out,
            &BoundsDoc {
                version: VERSION.into(),
                config: &cfg,
                report: &report,
            },
        )?;
    }
    let slack = report
        .slack
        .map(|s| format!("{s:.2}"))
        .unwrap_or_else(|| "inf".into());
    println!(
        "theorem {}: {} over {} trials (alpha = {:.6}, max gap = {:.6} vs epsilon = {}, slack = {}, sandwich {})",
        cfg.theorem,
        if report.pass { "PASS" } else { "FAIL" },
        cfg.trials,
        report.alpha,
        report.max_gap,
        cfg.epsilon,
        slack,
        if report.sandwich_ok { "ok" } else { "VIOLATED" },
    );
    Ok(if report.pass { 0 } else { 2 })
}

// ----------------------------------------------------------------- pipeline

#[derive(Args)]
struct PipelineArgs {
    /// JSON config mirroring the flags; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ground-truth scenario JSON (defaults to the bundled benchmark).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Sequences to simulate.
    #[arg(long)]
    sequences: Option<usize>,
    /// Points per sequence.
    #[arg(long)]
    length: Option<usize>,
    /// Base seed; stages use seed, seed+1 (fit), seed+2 (observation
    /// matrix), seed+3 (evaluation rollouts).
    #[arg(long)]
    seed: Option<u64>,
    /// MCMC sweeps for state discovery.
    #[arg(long)]
    sweeps: Option<usize>,
    /// Sweeps discarded before retaining draws (default: half).
    #[arg(long)]
    burn_in: Option<usize>,
    /// Autoregressive emission order (0 for static Gaussians).
    #[arg(long)]
    ar_order: Option<usize>,
    /// Monte Carlo draws per state for the observation matrix.
    #[arg(long)]
    n_mc: Option<u64>,
    /// Transition accuracy target for the coverage check.
    #[arg(long)]
    alpha: Option<f64>,
    /// Transition confidence target for the coverage check.
    #[arg(long)]
    delta: Option<f64>,
    /// Planning horizon.
    #[arg(long)]
    horizon: Option<usize>,
    /// Planning solver: "dp" or "enum".
    #[arg(long)]
    solver: Option<String>,
    /// Evaluation episodes (0 skips the simulation cross-check).
    #[arg(long)]
    episodes: Option<u64>,
    /// Which labels feed transition estimation: "map" (discovered) or
    /// "latent" (ground truth, for debugging).
    #[arg(long)]
    label_source: Option<String>,
    /// Output directory for all artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub scenario: Option<PathBuf>,
    pub sequences: usize,
    pub length: usize,
    pub seed: u64,
    pub sweeps: usize,
    pub burn_in: Option<usize>,
    pub ar_order: usize,
    pub n_mc: u64,
    pub alpha: f64,
    pub delta: f64,
    pub horizon: usize,
    pub solver: String,
    pub episodes: u64,
    pub label_source: String,
    pub out: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scenario: None,
            sequences: 6,
            length: 5000,
            seed: 0,
            sweeps: 400,
            burn_in: None,
            ar_order: 0,
            n_mc: 1_000_000,
            alpha: 0.05,
            delta: 0.9,
            horizon: 3,
            solver: "dp".into(),
            episodes: 50_000,
            label_source: "map".into(),
            out: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct PipelineReport {
    pub version: String,
    pub config: PipelineConfig,
    /// States in the MAP sample.
    pub map_states: usize,
    /// Hidden states in the generating scenario.
    pub true_states: usize,
    /// Label disagreement after optimal matching of discovered states to
    /// true states.
    pub hamming: f64,
    /// Discovered state -> true state (None for surplus states).
    pub state_mapping: Vec<Option<usize>>,
    /// Whether the matching is a bijection onto the true states.
    pub states_bijective: bool,
    /// Largest |estimated - true| transition entry, comparable only when
    /// the matching is bijective.
    pub transition_max_abs_error: Option<f64>,
    /// Smallest per-(state, action) sample count behind the estimates.
    pub min_coverage: u64,
    /// Coverage needed for the (alpha, delta) guarantee.
    pub required_coverage: u64,
    pub coverage_ok: bool,
    pub guarantee_note: String,
    pub model_valid: bool,
    /// Optimal value of the assembled model over the horizon.
    pub value: f64,
    pub simulation: Option<SimulationDoc>,
}

fn pipeline(args: PipelineArgs, verbose: bool) -> Result<i32> {
    let mut cfg: PipelineConfig = load_config(&args.config)?;
    cfg.scenario = args.scenario.or(cfg.scenario);
    cfg.sequences = args.sequences.unwrap_or(cfg.sequences);
    cfg.length = args.length.unwrap_or(cfg.length);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.sweeps = args.sweeps.unwrap_or(cfg.sweeps);
    cfg.burn_in = args.burn_in.or(cfg.burn_in);
    cfg.ar_order = args.ar_order.unwrap_or(cfg.ar_order);
    cfg.n_mc = args.n_mc.unwrap_or(cfg.n_mc);
    cfg.alpha = args.alpha.unwrap_or(cfg.alpha);
    cfg.delta = args.delta.unwrap_or(cfg.delta);
    cfg.horizon = args.horizon.unwrap_or(cfg.horizon);
    cfg.solver = args.solver.unwrap_or(cfg.solver);
    cfg.episodes = args.episodes.unwrap_or(cfg.episodes);
    cfg.label_source = args.label_source.unwrap_or(cfg.label_source);
    cfg.out = args.out.or(cfg.out);
    print_config(verbose, &cfg);

    let out = cfg.out.clone().context("--out directory is required")?;
    ensure_dir(&out)?;

    // Generation.
    let scenario = load_scenario(&cfg.scenario)?;
    let data = simulate_continuous(&scenario, cfg.sequences, cfg.length, cfg.seed)?;
    write_time_series_file(&out.join("data.csv"), &data)?;
    write_json(
        &out.join("truth.json"),
        &TruthDoc {
            version: VERSION.into(),
            config: GenDataConfig {
                scenario: cfg.scenario.clone(),
                sequences: cfg.sequences,
                length: cfg.length,
                seed: cfg.seed,
                out: Some(out.clone()),
            },
            scenario: scenario.clone(),
        },
    )?;
    if verbose {
        println!("generated {} sequences x {}", cfg.sequences, cfg.length);
    }

    // State discovery.
    let learn_cfg = LearnConfig {
        data: Some(out.join("data.csv")),
        sweeps: cfg.sweeps,
        burn_in: cfg.burn_in,
        seed: cfg.seed + 1,
        ar_order: cfg.ar_order,
        out: Some(out.clone()),
        ..LearnConfig::default()
    };
    let hyper = resolve_hyper(&data, &learn_cfg)?;
    let fit = fit_bphmm(&data, &hyper, &fit_config(&learn_cfg))?;
    let map = fit.map();
    write_json(
        &out.join("posterior.json"),
        &LearnDoc {
            version: VERSION.into(),
            config: learn_cfg.clone(),
            num_states_trace: fit.num_states_trace.clone(),
            log_joint_trace: fit.log_joint_trace.clone(),
            map: MapSampleDoc {
                num_states: map.num_states,
                log_joint: map.log_joint,
                emissions: map.emissions.clone(),
                features: map.features.flags().to_vec(),
                trans_rows: map
                    .trans_rows
                    .iter()
                    .map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect())
                    .collect(),
            },
        },
    )?;
    let label_series: Vec<LabelSeries> = data
        .iter()
        .zip(&map.labels)
        .map(|(series, labels)| LabelSeries {
            id: series.id.clone(),
            labels: labels.clone(),
            actions: series.actions.clone(),
        })
        .collect();
    write_labels_file(&out.join("labels.csv"), &label_series)?;
    if verbose {
        println!("MAP has {} states", map.num_states);
    }

    // Match discovered states against the generating truth.
    let est_flat: Vec<usize> = map.labels.iter().flatten().copied().collect();
    let truth_flat: Vec<usize> = data
        .iter()
        .flat_map(|s| {
            s.latent_states
                .as_ref()
                .expect("synthetic data records latent states")
                .iter()
                .map(|&z| scenario.human_component(z))
        })
        .collect();
    let matching = match_states(&est_flat, &truth_flat)?;
    let true_states = scenario.human_state_count();
    let mut mapping = matching.mapping.clone();
    mapping.resize(map.num_states, None);
    let matched: Vec<usize> = mapping.iter().flatten().copied().collect();
    let states_bijective = map.num_states == true_states
        && matched.len() == true_states
        && {
            let mut seen = matched.clone();
            seen.sort_unstable();
            seen.dedup();
            seen.len() == true_states
        };

    // Observation matrix over discovered states.
    let obs = estimate_observation_matrix(&map.emissions, cfg.n_mc, cfg.seed + 2)?;
    write_json(
        &out.join("obs.json"),
        &ObsMatrixDoc {
            version: VERSION.into(),
            config: ObsMatrixConfig {
                posterior: Some(out.join("posterior.json")),
                n_mc: cfg.n_mc,
                seed: cfg.seed + 2,
                out: Some(out.join("obs.json")),
            },
            matrix: obs.clone(),
        },
    )?;

    // Transition estimation from the chosen label source.
    let actions: Vec<Vec<usize>> = data
        .iter()
        .map(|s| s.actions.clone().expect("synthetic data records actions"))
        .collect();
    let (trans_labels, trans_states): (Vec<Vec<usize>>, usize) = match cfg.label_source.as_str() {
        "map" => (map.labels.clone(), map.num_states),
        "latent" => (
            data.iter()
                .map(|s| {
                    s.latent_states
                        .as_ref()
                        .expect("synthetic data records latent states")
                        .iter()
                        .map(|&z| scenario.human_component(z))
                        .collect()
                })
                .collect(),
            true_states,
        ),
        other => bail!("unknown label source '{other}' (expected map or latent)"),
    };
    let num_actions = scenario.pomdp.num_actions();
    let counts = count_transitions(&trans_labels, &actions, trans_states, num_actions)?;
    let (transition, coverage) = estimate_transitions(&counts);
    let required = required_samples(cfg.alpha, cfg.delta)?;
    write_json(
        &out.join("trans.json"),
        &TransDoc {
            version: VERSION.into(),
            config: EstimateTransConfig {
                labels: Some(out.join("labels.csv")),
                num_states: Some(trans_states),
                num_actions: Some(num_actions),
                alpha: cfg.alpha,
                delta: cfg.delta,
                out: Some(out.join("trans.json")),
            },
            transition: transition.clone(),
            coverage: (&coverage).into(),
            required_samples: required,
            guarantee_note: PER_ENTRY_NOTE.into(),
        },
    )?;

    // Compare against truth where the matching identifies states. In
    // "latent" mode labels are already in true coordinates.
    let identity_mapping: Vec<Option<usize>> = (0..true_states).map(Some).collect();
    let compare_mapping = if cfg.label_source == "latent" {
        &identity_mapping
    } else {
        &mapping
    };
    let comparable = if cfg.label_source == "latent" {
        true
    } else {
        states_bijective
    };
    let transition_max_abs_error = if comparable {
        let mut worst = 0.0f64;
        for a in 0..num_actions {
            for (s, row) in transition[a].iter().enumerate() {
                let ts = compare_mapping[s].expect("bijective mapping");
                for (s2, &p) in row.iter().enumerate() {
                    let ts2 = compare_mapping[s2].expect("bijective mapping");
                    worst = worst.max((p - scenario.pomdp.transition[a][ts][ts2]).abs());
                }
            }
        }
        Some(worst)
    } else {
        None
    };

    // Assemble the learned model in the discovered state space. Rewards
    // transfer from the scenario through the matching; surplus states earn
    // zero everywhere.
    let model = PomdpModel {
        states: (0..trans_states).map(|s| format!("s{s}")).collect(),
        state_factors: None,
        actions: scenario.pomdp.actions.clone(),
        observations: (0..trans_states).map(|o| format!("o{o}")).collect(),
        transition,
        observation_fn: if cfg.label_source == "latent" {
            // The observation matrix is over discovered states; in latent
            // mode it is only meaningful when the state counts agree.
            if map.num_states == true_states {
                obs.probs.clone()
            } else {
                (0..true_states)
                    .map(|s| (0..true_states).map(|o| f64::from(u8::from(o == s))).collect())
                    .collect()
            }
        } else {
            obs.probs.clone()
        },
        reward: (0..trans_states)
            .map(|s| {
                (0..num_actions)
                    .map(|a| {
                        compare_mapping
                            .get(s)
                            .copied()
                            .flatten()
                            .map_or(0.0, |ts| scenario.pomdp.reward[ts][a])
                    })
                    .collect()
            })
            .collect(),
        r_max: scenario.pomdp.r_max,
        initial_belief: vec![1.0 / trans_states as f64; trans_states],
    };
    let violations = validate_model(&model);
    let model_valid = violations.is_empty();
    if !model_valid {
        for v in &violations {
            eprintln!("model violation: {v}");
        }
        bail!("assembled model failed validation");
    }
    fs::write(&out.join("model.json"), serialize_model(&model)? + "\n")?;

    // Plan and evaluate on the learned model.
    let limits = PlannerLimits::default();
    let (policy, value) = match cfg.solver.as_str() {
        "dp" => solve_optimal_dp(&model, cfg.horizon, &limits)?,
        "enum" => solve_optimal_enum(&model, cfg.horizon, &limits)?,
        other => bail!("unknown solver '{other}' (expected dp or enum)"),
    };
    let policy_json: serde_json::Value = serde_json::from_str(&policy_to_json(&policy, &model)?)?;
    write_json(
        &out.join("policy.json"),
        &PlanDoc {
            version: VERSION.into(),
            config: PlanConfig {
                model: Some(out.join("model.json")),
                horizon: cfg.horizon,
                solver: cfg.solver.clone(),
                out: Some(out.join("policy.json")),
            },
            value,
            policy: policy_json,
        },
    )?;
    let simulation = if cfg.episodes > 0 {
        let (mean, std_err) =
            simulate_discrete(&model, &policy, cfg.horizon, cfg.episodes, cfg.seed + 3)?;
        let within = (mean - value).abs() <= 3.0 * std_err + 1e-9;
        Some(SimulationDoc {
            mean,
            std_err,
            episodes: cfg.episodes,
            seed: cfg.seed + 3,
            within_three_se: within,
        })
    } else {
        None
    };

    let report = PipelineReport {
        version: VERSION.into(),
        config: cfg.clone(),
        map_states: map.num_states,
        true_states,
        hamming: matching.hamming,
        state_mapping: mapping,
        states_bijective,
        transition_max_abs_error,
        min_coverage: coverage.min_total,
        required_coverage: required,
        coverage_ok: coverage.min_total >= required,
        guarantee_note: PER_ENTRY_NOTE.into(),
        model_valid,
        value,
        simulation,
    };
    write_json(&out.join("report.json"), &report)?;

    println!(
        "pipeline: {} states (true {}), hamming {:.4}, transition max error {}, coverage {}/{} ({}), value {:.6}",
        report.map_states,
        report.true_states,
        report.hamming,
        report
            .transition_max_abs_error
            .map(|e| format!("{e:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        report.min_coverage,
        report.required_coverage,
        if report.coverage_ok { "ok" } else { "short" },
        report.value,
    );
    println!("artifacts in {}", out.display());
    Ok(0)
}
