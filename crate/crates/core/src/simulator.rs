//! Synthetic LLM pool with a planted ground-truth utility tensor.
//!
//! A [`World`] fixes, per query, model and grid batch size, whether the
//! query is answered correctly. Calibration probes it, strategies are
//! scheduled against it, and [`replay`] scores the outcome.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calibration::{apply_profile, calibrate_pool, BatchUtilityProbe, CalibrationOptions, CalibrationProfile, ProbeOutcome};
use crate::error::{Error, Result};
use crate::frontier::{build_frontier, candidate_states, Frontier};
use crate::model::{batch_group_cost, ModelPool, ModelSpec, Query, State};
use crate::money::Money;
use crate::oracle::{exact_solve, ExactInstance};
use crate::router::{Metric, Router, DEFAULT_K_NEIGHBORS};
use crate::scheduler::{exact_spend, greedy_schedule, pack_batches, Assignment, InvocationBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModel {
    pub id: String,
    pub input_price: Money,
    pub output_price: Money,
    pub system_prompt_tokens: u64,
    /// Planted decay `1 - alpha * (b - 1)^beta`.
    pub alpha: f64,
    pub beta: f64,
    /// Probability of a correct unbatched answer on a query of difficulty 0.
    pub competence: f64,
}

impl SyntheticModel {
    pub fn planted_decay(&self, b: u32) -> f64 {
        planted_decay(self.alpha, self.beta, b)
    }
}

pub fn planted_decay(alpha: f64, beta: f64, b: u32) -> f64 {
    if b <= 1 {
        1.0
    } else {
        1.0 - alpha * f64::from(b - 1).powf(beta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub n: usize,
    pub dim: usize,
    pub clusters: usize,
    /// Difficulty of the hardest cluster; clusters are spread evenly over
    /// `[0, difficulty_gradient]`.
    pub difficulty_gradient: f64,
    pub seed: u64,
    #[serde(default = "default_input_tokens")]
    pub input_tokens: (u32, u32),
    #[serde(default = "default_output_tokens")]
    pub output_tokens: (u32, u32),
    /// Largest batch size in the grid `{1, 4, 8, ...}`.
    #[serde(default = "default_max_batch")]
    pub max_batch: u32,
}

fn default_input_tokens() -> (u32, u32) {
    (50, 150)
}

fn default_output_tokens() -> (u32, u32) {
    (5, 20)
}

fn default_max_batch() -> u32 {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPoolSpec {
    pub models: Vec<SyntheticModel>,
    pub workload: WorkloadSpec,
}

impl SyntheticPoolSpec {
    pub fn grid(&self) -> Vec<u32> {
        let max = self.workload.max_batch;
        std::iter::once(1).chain((4..=max).step_by(4)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.workload;
        if self.models.is_empty() {
            return Err(Error::invalid("spec needs at least one model"));
        }
        if w.n == 0 || w.dim == 0 || w.clusters == 0 {
            return Err(Error::invalid("n, dim and clusters must be positive"));
        }
        if !(0.0..=1.0).contains(&w.difficulty_gradient) {
            return Err(Error::invalid("difficulty_gradient must lie in [0, 1]"));
        }
        for (name, (lo, hi)) in [("input_tokens", w.input_tokens), ("output_tokens", w.output_tokens)] {
            if lo == 0 || lo > hi {
                return Err(Error::invalid(format!("{name} range must satisfy 1 <= lo <= hi")));
            }
        }
        if w.max_batch == 0 {
            return Err(Error::invalid("max_batch must be positive"));
        }
        let grid = self.grid();
        for m in &self.models {
            if !(0.0..=1.0).contains(&m.competence) {
                return Err(Error::invalid(format!("model {}: competence outside [0, 1]", m.id)));
            }
            if !(m.alpha >= 0.0 && m.beta > 0.0 && m.alpha.is_finite() && m.beta.is_finite()) {
                return Err(Error::invalid(format!("model {}: need alpha >= 0 and beta > 0", m.id)));
            }
            if grid.iter().any(|&b| !(0.0..=1.0).contains(&m.planted_decay(b))) {
                return Err(Error::invalid(format!("model {}: decay leaves [0, 1] on the grid", m.id)));
            }
        }
        Ok(())
    }
}

/// A generated workload together with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: SyntheticPoolSpec,
    /// Pool with the full grid and no calibration applied.
    pub pool: ModelPool,
    /// Queries carrying their unbatched truth as labels.
    pub queries: Vec<Query>,
    pub difficulty: Vec<f64>,
    grid: Vec<u32>,
    truth: Vec<u8>,
    index: HashMap<String, usize>,
}

/// Draws a deterministic world from `spec`.
pub fn gen_workload(spec: &SyntheticPoolSpec) -> Result<World> {
    spec.validate()?;
    let w = &spec.workload;
    let grid = spec.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(w.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let spread = Normal::new(0.0, 0.15).expect("cluster spread");

    let centers: Vec<Vec<f64>> = (0..w.clusters)
        .map(|_| (0..w.dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let cluster_difficulty = |c: usize| {
        if w.clusters == 1 {
            0.0
        } else {
            w.difficulty_gradient * c as f64 / (w.clusters - 1) as f64
        }
    };

    let k = spec.models.len();
    let g = grid.len();
    let mut truth = vec![0u8; w.n * k * g];
    let mut queries = Vec::with_capacity(w.n);
    let mut difficulty = Vec::with_capacity(w.n);
    for i in 0..w.n {
        let c = rng.random_range(0..w.clusters);
        let embedding: Vec<f64> = centers[c].iter().map(|x| x + spread.sample(&mut rng)).collect();
        let input = rng.random_range(w.input_tokens.0..=w.input_tokens.1);
        let output = rng.random_range(w.output_tokens.0..=w.output_tokens.1);
        let d = cluster_difficulty(c);
        let mut labels = Vec::with_capacity(k);
        for (mk, m) in spec.models.iter().enumerate() {
            let p = m.competence * (1.0 - d);
            let base = rng.random::<f64>() < p;
            for (pos, &b) in grid.iter().enumerate() {
                let survives = pos == 0 || rng.random::<f64>() < m.planted_decay(b);
                truth[(i * k + mk) * g + pos] = u8::from(base && survives);
            }
            labels.push(u8::from(base));
        }
        queries.push(Query::new(format!("q{}", i + 1), embedding, input, output)?.with_truth(labels)?);
        difficulty.push(d);
    }

    let models = spec
        .models
        .iter()
        .map(|m| {
            ModelSpec::new(m.id.clone(), m.input_price, m.output_price, m.system_prompt_tokens)?
                .with_batch_grid(grid.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let pool = ModelPool::new(models)?;
    let index = queries.iter().enumerate().map(|(i, q)| (q.id.clone(), i)).collect();
    Ok(World { spec: spec.clone(), pool, queries, difficulty, grid, truth, index })
}

impl World {
    pub fn grid(&self) -> &[u32] {
        &self.grid
    }

    pub fn query_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Planted utility of query `i` at `state`.
    pub fn utility(&self, i: usize, state: State) -> Result<u8> {
        let k = self.pool.len();
        if state.model >= k {
            return Err(Error::invalid(format!("unknown model index {}", state.model)));
        }
        if i >= self.queries.len() {
            return Err(Error::invalid(format!("unknown query index {i}")));
        }
        let pos = self
            .grid
            .iter()
            .position(|&b| b == state.batch_size)
            .ok_or_else(|| Error::invalid(format!("batch size {} not in the world grid", state.batch_size)))?;
        Ok(self.truth[(i * k + state.model) * self.grid.len() + pos])
    }
}

impl BatchUtilityProbe for World {
    fn probe(&self, model: usize, batch_size: u32, coreset: &[Query]) -> Result<ProbeOutcome> {
        let spec = self.pool.model(model).map_err(|e| Error::Probe(e.to_string()))?;
        let utilities = coreset
            .iter()
            .map(|q| {
                let i = self
                    .query_index(&q.id)
                    .ok_or_else(|| Error::Probe(format!("query {} is not part of the world", q.id)))?;
                self.utility(i, State::new(model, batch_size)).map(f64::from)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ProbeOutcome { utilities, cost: batch_group_cost(spec, batch_size, coreset) })
    }
}

/// One (cost, utility) point of a strategy at a budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub strategy: String,
    pub budget: Money,
    /// Cost of the packed invocations, partial batches included.
    pub realized_cost: Money,
    pub realized_utility: f64,
    pub proxy_utility: f64,
}

pub fn write_eval_csv<W: Write>(mut out: W, points: &[EvalPoint]) -> std::io::Result<()> {
    writeln!(out, "strategy,budget,cost,utility,proxy_utility")?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{:.6}",
            p.strategy, p.budget, p.realized_cost, p.realized_utility, p.proxy_utility
        )?;
    }
    Ok(())
}

/// Scores an assignment against the planted truth. `queries[i]` is the
/// world query index of assignment position `i`.
pub fn replay(
    world: &World,
    strategy: &str,
    assignment: &Assignment,
    batches: &[InvocationBatch],
    queries: &[usize],
) -> Result<EvalPoint> {
    if queries.len() != assignment.len() {
        return Err(Error::invalid("replay needs one world index per assigned query"));
    }
    let mut seen = vec![false; assignment.len()];
    for b in batches {
        if b.members.len() > b.batch_size as usize {
            return Err(Error::invalid("batch holds more members than its size"));
        }
        for &m in &b.members {
            let state = assignment.states.get(m).ok_or_else(|| Error::invalid(format!("unknown member {m}")))?;
            if *state != State::new(b.model, b.batch_size) || std::mem::replace(&mut seen[m], true) {
                return Err(Error::invalid(format!("batches disagree with the assignment at query {m}")));
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::invalid("some assigned queries are in no batch"));
    }
    let mut utility = 0u64;
    for (&i, &s) in queries.iter().zip(&assignment.states) {
        utility += u64::from(world.utility(i, s)?);
    }
    let members: Vec<Query> = queries.iter().map(|&i| world.queries[i].clone()).collect();
    Ok(EvalPoint {
        strategy: strategy.to_owned(),
        budget: assignment.budget,
        realized_cost: exact_spend(batches, &world.pool, &members)?,
        realized_utility: utility as f64,
        proxy_utility: assignment.total_proxy_utility().to_f64(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Every calibrated (model, batch size) state.
    Robatch,
    /// Every model at batch size 1.
    RouterOnly,
    /// One model (0-based index) over its calibrated grid.
    BatchOnly(usize),
    /// Every model at one batch size.
    FixedBatch(u32),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Robatch => f.write_str("robatch"),
            Strategy::RouterOnly => f.write_str("router_only"),
            Strategy::BatchOnly(k) => write!(f, "batch_only:{}", k + 1),
            Strategy::FixedBatch(b) => write!(f, "fixed_batch:{b}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// `robatch`, `router_only`, `batch_only:<k>` (1-based model) or
    /// `fixed_batch:<b>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown strategy {s:?}"));
        match s.split_once(':') {
            None if s == "robatch" => Ok(Strategy::Robatch),
            None if s == "router_only" => Ok(Strategy::RouterOnly),
            Some(("batch_only", k)) => match k.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(Strategy::BatchOnly(k - 1)),
                _ => Err(bad()),
            },
            Some(("fixed_batch", b)) => match b.parse::<u32>() {
                Ok(b) if b >= 1 => Ok(Strategy::FixedBatch(b)),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

/// Candidate states a strategy may use on a calibrated pool.
pub fn strategy_states(strategy: Strategy, pool: &ModelPool) -> Result<Vec<State>> {
    Ok(match strategy {
        Strategy::Robatch => candidate_states(pool),
        Strategy::RouterOnly => (0..pool.len()).map(|k| State::new(k, 1)).collect(),
        Strategy::BatchOnly(k) => pool.model(k)?.usable_batch_sizes().map(|b| State::new(k, b)).collect(),
        Strategy::FixedBatch(b) => (0..pool.len()).map(|k| State::new(k, b)).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Solver {
    Greedy,
    /// Exhaustive optimum over the frontiers, refusing search spaces above the cap.
    Oracle { cap: u128 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Leading world queries used for calibration and router training; the
    /// rest are routed.
    pub train_queries: usize,
    pub k_neighbors: usize,
    pub metric: Metric,
    pub calibration: CalibrationOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train_queries: 256,
            k_neighbors: DEFAULT_K_NEIGHBORS,
            metric: Metric::Cosine,
            calibration: CalibrationOptions::default(),
        }
    }
}

/// A calibrated pool and trained router over one world, ready to run
/// strategies on its evaluation queries.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub world: World,
    pub profile: CalibrationProfile,
    pub pool: ModelPool,
    pub router: Router,
    /// World indices of the routed queries.
    pub eval: Vec<usize>,
    /// Router estimate per evaluation query and model.
    pub unbatched: Vec<Vec<f64>>,
}

impl Experiment {
    pub fn prepare(world: World, config: &ExperimentConfig) -> Result<Self> {
        let n = world.queries.len();
        if config.train_queries == 0 || config.train_queries >= n {
            return Err(Error::invalid(format!(
                "train_queries must lie in [1, {}) for a world of {n} queries",
                n
            )));
        }
        let training = &world.queries[..config.train_queries];
        let profile = calibrate_pool(&world.pool, training, &world, &config.calibration)?;
        let pool = apply_profile(&world.pool, &profile)?;
        let router = Router::train(training, config.k_neighbors.min(training.len()), config.metric)?;
        let eval: Vec<usize> = (config.train_queries..n).collect();
        let unbatched = eval
            .iter()
            .map(|&i| router.estimate(&world.queries[i].embedding))
            .collect::<Result<Vec<_>>>()?;
        Ok(Experiment { world, profile, pool, router, eval, unbatched })
    }

    pub fn states(&self, strategy: Strategy) -> Result<Vec<State>> {
        if let Strategy::FixedBatch(b) = strategy {
            if !self.world.grid().contains(&b) {
                return Err(Error::invalid(format!("batch size {b} not in the world grid")));
            }
        }
        strategy_states(strategy, &self.pool)
    }

    /// Per-query frontiers restricted to the strategy's states.
    pub fn frontiers(&self, strategy: Strategy) -> Result<Vec<Frontier>> {
        let states = self.states(strategy)?;
        self.eval
            .iter()
            .zip(&self.unbatched)
            .map(|(&i, u)| build_frontier(&self.world.queries[i], &states, u, &self.pool))
            .collect()
    }

    pub fn run_strategy(&self, strategy: Strategy, budget: Money, solver: Solver) -> Result<EvalPoint> {
        let frontiers = self.frontiers(strategy)?;
        let assignment = match solver {
            Solver::Greedy => greedy_schedule(&frontiers, budget)?,
            Solver::Oracle { cap } => {
                let inst = ExactInstance::from_frontiers(&frontiers, budget);
                let sol = exact_solve(&inst, cap)?;
                Assignment::from_positions(&frontiers, &sol.choice, budget)?
            }
        };
        let batches = pack_batches(&assignment);
        replay(&self.world, &strategy.to_string(), &assignment, &batches, &self.eval)
    }
}
