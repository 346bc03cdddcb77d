use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use robatch_core::calibration::{
    apply_profile, calibrate_pool, BatchUtilityProbe, CalibrationOptions, CalibrationProfile, ProbeOutcome,
    ScalingKind, SearchMode,
};
use robatch_core::frontier::{build_frontier, write_frontiers_csv, Frontier};
use robatch_core::io::{read_json, write_json, Workload};
use robatch_core::model::{batch_group_cost, ModelPool, Query};
use robatch_core::money::{Epsilon, Money, Utility, SCALE};
use robatch_core::oracle::{brute_force_max_coverage, exact_solve, reduce_max_coverage, MaxCoverage, DEFAULT_ORACLE_CAP};
use robatch_core::router::{Metric, Router, DEFAULT_K_NEIGHBORS};
use robatch_core::scheduler::{exact_spend, greedy_schedule, pack_batches};
use robatch_core::simulator::{
    gen_workload, strategy_states, write_eval_csv, Experiment, ExperimentConfig, Solver, Strategy, SyntheticPoolSpec,
};
use robatch_core::{Error, Result};

const EXIT_FAILURE: u8 = 1;
const EXIT_BUDGET_INFEASIBLE: u8 = 2;
const EXIT_SCHEMA_OR_IO: u8 = 3;
const EXIT_ORACLE_CAP: u8 = 4;

#[derive(Parser)]
#[command(name = "robatch", version, about = "Budget-constrained LLM routing with batching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate effective batch sizes and scaling curves from labelled training queries.
    Calibrate(CalibrateArgs),
    /// Assign every query a (model, batch size) state within a budget.
    Route(RouteArgs),
    /// Run strategies over a synthetic pool for a sweep of budgets.
    Simulate(SimulateArgs),
    /// Encode a max-coverage instance as a routing instance and compare optima.
    Reduce(ReduceArgs),
    /// Export per-query Pareto frontiers.
    Frontier(FrontierArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScalingArg {
    Piecewise,
    PowerLaw,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cosine,
    Euclidean,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::Euclidean => Metric::Euclidean,
        }
    }
}

#[derive(Args)]
struct CalibrateArgs {
    /// Pool JSON.
    #[arg(long)]
    pool: PathBuf,
    /// Training workload JSON; every query needs truth_utilities.
    #[arg(long)]
    workload: PathBuf,
    /// Output directory for profile.json and router.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    #[arg(long, default_value_t = robatch_core::calibration::DEFAULT_CORESET_SIZE)]
    coreset_size: usize,
    /// Scan every grid size instead of ternary search.
    #[arg(long)]
    exhaustive_scan: bool,
    #[arg(long, value_enum, default_value = "piecewise")]
    scaling: ScalingArg,
    #[arg(long, default_value_t = DEFAULT_K_NEIGHBORS)]
    k_neighbors: usize,
    #[arg(long, value_enum, default_value = "cosine")]
    metric: MetricArg,
}

#[derive(Args)]
struct PipelineInputs {
    /// Pool JSON.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Workload JSON with the queries to route.
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Calibration profile JSON.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Trained router JSON.
    #[arg(long, conflicts_with = "training")]
    router: Option<PathBuf>,
    /// Labelled workload JSON to train a router from.
    #[arg(long)]
    training: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K_NEIGHBORS)]
    k_neighbors: usize,
    #[arg(long, value_enum, default_value = "cosine")]
    metric: MetricArg,
    /// robatch, router_only, batch_only:<k> or fixed_batch:<b>.
    #[arg(long, default_value = "robatch")]
    strategy: Strategy,
}

#[derive(Args)]
struct RouteArgs {
    #[arg(long)]
    budget: Money,
    /// Precomputed frontiers JSON; replaces the pool/workload inputs.
    #[arg(long, conflicts_with_all = ["pool", "workload", "profile", "router", "training"])]
    frontiers: Option<PathBuf>,
    #[command(flatten)]
    inputs: PipelineInputs,
    /// Output directory for assignment.json, trace.csv and batches.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Synthetic pool spec JSON.
    #[arg(long)]
    pool: PathBuf,
    /// Overrides the workload seed from the pool file.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated budgets.
    #[arg(long, value_delimiter = ',', required = true)]
    budget: Vec<Money>,
    /// Comma-separated strategies.
    #[arg(long, value_delimiter = ',', default_value = "robatch,router_only")]
    strategy: Vec<Strategy>,
    /// Leading queries used for calibration and router training; defaults to half.
    #[arg(long)]
    train_queries: Option<usize>,
    /// Solve each strategy exactly instead of greedily.
    #[arg(long)]
    oracle: bool,
    #[arg(long, default_value_t = DEFAULT_ORACLE_CAP)]
    oracle_cap: u128,
    #[arg(long)]
    exhaustive_scan: bool,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    /// Output directory for eval.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReduceArgs {
    /// Max-coverage instance JSON: {elements, sets, budget}.
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ORACLE_CAP)]
    oracle_cap: u128,
    /// Output directory for the reduced instance.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FrontierArgs {
    #[command(flatten)]
    inputs: PipelineInputs,
    /// Output directory for frontiers.csv and frontiers.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Replays recorded unbatched labels at every batch size.
struct LabelProbe<'a> {
    pool: &'a ModelPool,
}

impl BatchUtilityProbe for LabelProbe<'_> {
    fn probe(&self, model: usize, batch_size: u32, coreset: &[Query]) -> Result<ProbeOutcome> {
        let spec = self.pool.model(model)?;
        let utilities = coreset
            .iter()
            .map(|q| {
                q.truth_utilities
                    .as_ref()
                    .and_then(|t| t.get(model))
                    .map(|&u| f64::from(u))
                    .ok_or_else(|| Error::MissingLabels(format!("query {} has no label for model {}", q.id, spec.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ProbeOutcome { utilities, cost: batch_group_cost(spec, batch_size, coreset) })
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::BudgetInfeasible { .. } | Error::NoFeasibleAssignment { .. } => EXIT_BUDGET_INFEASIBLE,
        Error::OracleCapExceeded { .. } => EXIT_ORACLE_CAP,
        Error::Io { .. }
        | Error::Schema { .. }
        | Error::InvalidInput(_)
        | Error::PoolOrdering(_)
        | Error::DimensionMismatch { .. }
        | Error::MissingLabels(_) => EXIT_SCHEMA_OR_IO,
        _ => EXIT_FAILURE,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.display().to_string(), source })
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let io_err = |source| Error::Io { path: path.display().to_string(), source };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    f(&mut out).map_err(io_err)?;
    out.flush().map_err(io_err)
}

fn require_positive(budget: Money) -> Result<()> {
    if budget.is_positive() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("budget must be positive, got {budget}")))
    }
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let pool: ModelPool = read_json(&args.pool)?;
    let training: Workload = read_json(&args.workload)?;
    for q in &training.queries {
        match &q.truth_utilities {
            None => return Err(Error::MissingLabels(format!("query {} has no truth_utilities", q.id))),
            Some(t) if t.len() != pool.len() => {
                return Err(Error::InvalidInput(format!(
                    "query {}: {} labels for {} models",
                    q.id,
                    t.len(),
                    pool.len()
                )))
            }
            Some(_) => {}
        }
    }
    let options = CalibrationOptions {
        epsilon: Epsilon::from_f64(args.epsilon)?,
        coreset_size: args.coreset_size,
        search: if args.exhaustive_scan { SearchMode::Exhaustive } else { SearchMode::Ternary },
        scaling: match args.scaling {
            ScalingArg::Piecewise => ScalingKind::PiecewiseLinear,
            ScalingArg::PowerLaw => ScalingKind::PowerLaw,
        },
    };
    let profile = calibrate_pool(&pool, &training.queries, &LabelProbe { pool: &pool }, &options)?;
    let router = Router::train(&training.queries, args.k_neighbors, args.metric.into())?;
    create_dir(&args.out)?;
    write_json(&args.out.join("profile.json"), &profile)?;
    write_json(&args.out.join("router.json"), &router)?;
    println!("model\tb_max\tb_effect");
    for m in &profile.models {
        println!("{}\t{}\t{}", m.model_id, m.b_max, m.effective_batch_size);
    }
    Ok(())
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::InvalidInput(format!("--{flag} is required without --frontiers")))
}

/// Calibrated pool, routed queries and their frontiers.
fn pipeline_frontiers(inputs: &PipelineInputs) -> Result<(ModelPool, Vec<Query>, Vec<Frontier>)> {
    let mut pool: ModelPool = read_json(required(&inputs.pool, "pool")?)?;
    if let Some(path) = &inputs.profile {
        let profile: CalibrationProfile = read_json(path)?;
        pool = apply_profile(&pool, &profile)?;
    }
    let workload: Workload = read_json(required(&inputs.workload, "workload")?)?;
    let router: Router = match (&inputs.router, &inputs.training) {
        (Some(path), _) => read_json(path)?,
        (None, Some(path)) => {
            let training: Workload = read_json(path)?;
            Router::train(&training.queries, inputs.k_neighbors, inputs.metric.into())?
        }
        (None, None) => return Err(Error::InvalidInput("either --router or --training is required".into())),
    };
    if router.models() != pool.len() {
        return Err(Error::InvalidInput(format!(
            "router predicts {} models, pool has {}",
            router.models(),
            pool.len()
        )));
    }
    let states = strategy_states(inputs.strategy, &pool)?;
    let frontiers = workload
        .queries
        .iter()
        .map(|q| build_frontier(q, &states, &router.estimate(&q.embedding)?, &pool))
        .collect::<Result<Vec<_>>>()?;
    Ok((pool, workload.queries, frontiers))
}

fn cmd_route(args: &RouteArgs) -> Result<()> {
    require_positive(args.budget)?;
    let (pool, queries, frontiers) = match &args.frontiers {
        Some(path) => (None, None, read_json::<Vec<Frontier>>(path)?),
        None => {
            let (pool, queries, frontiers) = pipeline_frontiers(&args.inputs)?;
            (Some(pool), Some(queries), frontiers)
        }
    };
    let assignment = greedy_schedule(&frontiers, args.budget)?;
    let batches = pack_batches(&assignment);
    let exact = match (&pool, &queries) {
        (Some(pool), Some(queries)) => exact_spend(&batches, pool, queries)?.to_string(),
        _ => "n/a".to_owned(),
    };
    create_dir(&args.out)?;
    write_json(&args.out.join("assignment.json"), &assignment)?;
    write_json(&args.out.join("batches.json"), &batches)?;
    write_with(&args.out.join("trace.csv"), |w| assignment.write_trace_csv(w, pool.as_ref()))?;
    println!(
        "amortized spend {} | exact spend {} | proxy utility {}",
        assignment.amortized_spend(),
        exact,
        assignment.total_proxy_utility()
    );
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut spec: SyntheticPoolSpec = read_json(&args.pool)?;
    if let Some(seed) = args.seed {
        spec.workload.seed = seed;
    }
    for &b in &args.budget {
        require_positive(b)?;
    }
    let world = gen_workload(&spec)?;
    let config = ExperimentConfig {
        train_queries: args.train_queries.unwrap_or(spec.workload.n / 2),
        calibration: CalibrationOptions {
            epsilon: Epsilon::from_f64(args.epsilon)?,
            search: if args.exhaustive_scan { SearchMode::Exhaustive } else { SearchMode::Ternary },
            ..Default::default()
        },
        ..Default::default()
    };
    let experiment = Experiment::prepare(world, &config)?;
    let solver = if args.oracle { Solver::Oracle { cap: args.oracle_cap } } else { Solver::Greedy };
    let mut points = Vec::new();
    for &budget in &args.budget {
        for &strategy in &args.strategy {
            points.push(experiment.run_strategy(strategy, budget, solver)?);
        }
    }
    let mut csv = Vec::new();
    write_eval_csv(&mut csv, &points).expect("writing to memory");
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_with(&dir.join("eval.csv"), |w| w.write_all(&csv))?;
    }
    std::io::stdout()
        .write_all(&csv)
        .map_err(|source| Error::Io { path: "<stdout>".into(), source })
}

fn covered(u: Utility) -> i64 {
    u.units() / SCALE
}

fn cmd_reduce(args: &ReduceArgs) -> Result<()> {
    let mc: MaxCoverage = read_json(&args.instance)?;
    mc.validate()?;
    let instance = reduce_max_coverage(&mc)?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_json(&dir.join("reduced.json"), &instance)?;
    }
    let routed = match exact_solve(&instance, args.oracle_cap) {
        Ok(sol) => covered(sol.utility),
        // a zero budget admits no model, so nothing is covered
        Err(Error::NoFeasibleAssignment { .. }) => 0,
        Err(e) => return Err(e),
    };
    let brute = brute_force_max_coverage(&mc)? as i64;
    println!("routing optimum {routed}, max-coverage optimum {brute}");
    println!("{routed} == {brute}: {}", if routed == brute { "yes" } else { "no" });
    Ok(())
}

fn cmd_frontier(args: &FrontierArgs) -> Result<()> {
    let (pool, _, frontiers) = pipeline_frontiers(&args.inputs)?;
    create_dir(&args.out)?;
    write_json(&args.out.join("frontiers.json"), &frontiers)?;
    write_with(&args.out.join("frontiers.csv"), |w| write_frontiers_csv(w, &frontiers, Some(&pool)))?;
    let states: usize = frontiers.iter().map(Frontier::len).sum();
    println!("{} queries, {states} frontier states", frontiers.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ROBATCH_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_SCHEMA_OR_IO } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Route(a) => cmd_route(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Reduce(a) => cmd_reduce(a),
        Command::Frontier(a) => cmd_frontier(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
