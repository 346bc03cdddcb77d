//! Domain types shared by every stage and the per-token cost arithmetic.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::money::Money;
use crate::scaling::ScalingFn;

/// One LLM: pricing, system-prompt length and batching configuration.
///
/// `batch_grid` and `effective_batch_size` start at `[1]` / `1` and are
/// filled in by calibration. A grid given explicitly in the pool file is
/// kept and only intersected with the calibrated bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRecord", into = "ModelRecord")]
pub struct ModelSpec {
    pub id: String,
    /// Price per input token.
    pub input_price: Money,
    /// Price per output token.
    pub output_price: Money,
    pub system_prompt_tokens: u64,
    pub batch_grid: Vec<u32>,
    pub explicit_grid: bool,
    pub effective_batch_size: u32,
    pub scaling: ScalingFn,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelRecord {
    id: String,
    input_price: Money,
    output_price: Money,
    system_prompt_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    batch_grid: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    effective_batch_size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scaling: Option<ScalingFn>,
}

impl TryFrom<ModelRecord> for ModelSpec {
    type Error = Error;

    fn try_from(r: ModelRecord) -> Result<Self> {
        let mut spec = ModelSpec::new(r.id, r.input_price, r.output_price, r.system_prompt_tokens)?;
        if let Some(grid) = r.batch_grid {
            spec = spec.with_batch_grid(grid)?;
        }
        if let Some(b) = r.effective_batch_size {
            spec = spec.with_effective_batch_size(b)?;
        }
        if let Some(scaling) = r.scaling {
            spec.scaling = scaling;
        }
        Ok(spec)
    }
}

impl From<ModelSpec> for ModelRecord {
    fn from(m: ModelSpec) -> Self {
        ModelRecord {
            id: m.id,
            input_price: m.input_price,
            output_price: m.output_price,
            system_prompt_tokens: m.system_prompt_tokens,
            batch_grid: m.explicit_grid.then_some(m.batch_grid),
            effective_batch_size: Some(m.effective_batch_size),
            scaling: Some(m.scaling),
        }
    }
}

fn validate_grid(grid: &[u32]) -> Result<()> {
    if grid.first() != Some(&1) {
        return Err(Error::invalid("batch grid must start at 1"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("batch grid must be strictly increasing"));
    }
    Ok(())
}

impl ModelSpec {
    pub fn new(
        id: impl Into<String>,
        input_price: Money,
        output_price: Money,
        system_prompt_tokens: u64,
    ) -> Result<Self> {
        let id = id.into();
        if input_price < Money::ZERO || output_price < Money::ZERO {
            return Err(Error::invalid(format!("model {id}: prices must be nonnegative")));
        }
        Ok(ModelSpec {
            id,
            input_price,
            output_price,
            system_prompt_tokens,
            batch_grid: vec![1],
            explicit_grid: false,
            effective_batch_size: 1,
            scaling: ScalingFn::Constant,
        })
    }

    /// Fixes the candidate batch sizes for this model.
    pub fn with_batch_grid(mut self, grid: Vec<u32>) -> Result<Self> {
        validate_grid(&grid)?;
        self.batch_grid = grid;
        self.explicit_grid = true;
        if !self.batch_grid.contains(&self.effective_batch_size) {
            self.effective_batch_size = 1;
        }
        Ok(self)
    }

    pub fn with_effective_batch_size(mut self, b: u32) -> Result<Self> {
        if !self.batch_grid.contains(&b) {
            return Err(Error::invalid(format!(
                "model {}: effective batch size {b} not in grid {:?}",
                self.id, self.batch_grid
            )));
        }
        self.effective_batch_size = b;
        Ok(self)
    }

    pub fn with_scaling(mut self, scaling: ScalingFn) -> Self {
        self.scaling = scaling;
        self
    }

    /// Grid sizes the scheduler may use: every grid value up to the
    /// effective batch size.
    pub fn usable_batch_sizes(&self) -> impl Iterator<Item = u32> + '_ {
        self.batch_grid
            .iter()
            .copied()
            .take_while(move |&b| b <= self.effective_batch_size)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        validate_grid(&self.batch_grid)?;
        if !self.batch_grid.contains(&self.effective_batch_size) {
            return Err(Error::invalid(format!(
                "model {}: effective batch size not in grid",
                self.id
            )));
        }
        Ok(())
    }
}

/// One workload item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QueryRecord", into = "QueryRecord")]
pub struct Query {
    pub id: String,
    pub embedding: Vec<f64>,
    pub input_tokens: u32,
    pub expected_output_tokens: u32,
    /// Per-model 0/1 correctness at batch size 1, when known.
    pub truth_utilities: Option<Vec<u8>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct QueryRecord {
    id: String,
    embedding: Vec<f64>,
    input_tokens: u32,
    expected_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth_utilities: Option<Vec<u8>>,
}

impl TryFrom<QueryRecord> for Query {
    type Error = Error;
    fn try_from(r: QueryRecord) -> Result<Self> {
        let q = Query::new(r.id, r.embedding, r.input_tokens, r.expected_output_tokens)?;
        match r.truth_utilities {
            Some(t) => q.with_truth(t),
            None => Ok(q),
        }
    }
}

impl From<Query> for QueryRecord {
    fn from(q: Query) -> Self {
        QueryRecord {
            id: q.id,
            embedding: q.embedding,
            input_tokens: q.input_tokens,
            expected_output_tokens: q.expected_output_tokens,
            truth_utilities: q.truth_utilities,
        }
    }
}

impl Query {
    pub fn new(
        id: impl Into<String>,
        embedding: Vec<f64>,
        input_tokens: u32,
        expected_output_tokens: u32,
    ) -> Result<Self> {
        let id = id.into();
        if input_tokens == 0 || expected_output_tokens == 0 {
            return Err(Error::invalid(format!(
                "query {id}: input and expected output token counts must be at least 1"
            )));
        }
        if embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("query {id}: non-finite embedding")));
        }
        Ok(Query {
            id,
            embedding,
            input_tokens,
            expected_output_tokens,
            truth_utilities: None,
        })
    }

    pub fn with_truth(mut self, truth: Vec<u8>) -> Result<Self> {
        if truth.iter().any(|&u| u > 1) {
            return Err(Error::invalid(format!(
                "query {}: truth utilities must be 0 or 1",
                self.id
            )));
        }
        self.truth_utilities = Some(truth);
        Ok(self)
    }
}

/// A routing decision for one query: model index (0-based position in the
/// pool) and batch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct State {
    pub model: usize,
    pub batch_size: u32,
}

impl State {
    pub const fn new(model: usize, batch_size: u32) -> Self {
        State { model, batch_size }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(m{}, {})", self.model + 1, self.batch_size)
    }
}

/// Models ordered from cheapest to most expensive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoolRecord", into = "PoolRecord")]
pub struct ModelPool {
    models: Vec<ModelSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PoolRecord {
    models: Vec<ModelSpec>,
}

impl TryFrom<PoolRecord> for ModelPool {
    type Error = Error;
    fn try_from(r: PoolRecord) -> Result<Self> {
        ModelPool::new(r.models)
    }
}

impl From<ModelPool> for PoolRecord {
    fn from(p: ModelPool) -> Self {
        PoolRecord { models: p.models }
    }
}

impl ModelPool {
    pub fn new(models: Vec<ModelSpec>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::invalid("model pool is empty"));
        }
        for m in &models {
            m.validate()?;
        }
        for w in models.windows(2) {
            if w[0].input_price > w[1].input_price || w[0].output_price > w[1].output_price {
                return Err(Error::PoolOrdering(format!(
                    "{} (in {}, out {}) precedes {} (in {}, out {})",
                    w[0].id,
                    w[0].input_price,
                    w[0].output_price,
                    w[1].id,
                    w[1].input_price,
                    w[1].output_price
                )));
            }
        }
        let mut ids: Vec<&str> = models.iter().map(|m| m.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate model id in pool"));
        }
        Ok(ModelPool { models })
    }

    pub fn models(&self) -> &[ModelSpec] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn model(&self, index: usize) -> Result<&ModelSpec> {
        self.models
            .get(index)
            .ok_or_else(|| Error::invalid(format!("unknown model index {index}")))
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.models.iter().position(|m| m.id == id)
    }

    /// Checks that `state` names a usable (model, batch size) pair.
    pub fn check_state(&self, state: State) -> Result<&ModelSpec> {
        let m = self.model(state.model)?;
        if !m.batch_grid.contains(&state.batch_size) || state.batch_size > m.effective_batch_size {
            return Err(Error::invalid(format!(
                "batch size {} not usable for model {}",
                state.batch_size, m.id
            )));
        }
        Ok(m)
    }

    pub(crate) fn models_mut(&mut self) -> &mut [ModelSpec] {
        &mut self.models
    }
}

/// Cost of the shared system prompt of one invocation.
pub fn system_prompt_cost(model: &ModelSpec) -> Money {
    model.input_price * model.system_prompt_tokens
}

/// Cost incurred by the query's own input and output tokens.
pub fn query_cost(query: &Query, model: &ModelSpec) -> Money {
    model.input_price * u64::from(query.input_tokens)
        + model.output_price * u64::from(query.expected_output_tokens)
}

/// A query's share of one invocation at batch size `state.batch_size`:
/// `C_sys / b + C_q`, rounded to the nearest nano-unit.
pub fn amortized_state_cost(query: &Query, state: State, pool: &ModelPool) -> Result<Money> {
    let m = pool.model(state.model)?;
    if state.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    Ok(system_prompt_cost(m).div_round(u64::from(state.batch_size)) + query_cost(query, m))
}

/// Exact cost of serving `queries` on `model` in invocations of at most `b`
/// queries each: one system prompt per invocation plus every query's own cost.
pub fn batch_group_cost<'a, I>(model: &ModelSpec, b: u32, queries: I) -> Money
where
    I: IntoIterator<Item = &'a Query>,
{
    assert!(b > 0, "batch size must be positive");
    let mut n: u64 = 0;
    let mut own = Money::ZERO;
    for q in queries {
        n += 1;
        own += query_cost(q, model);
    }
    let invocations = n.div_ceil(u64::from(b));
    system_prompt_cost(model) * invocations + own
}
