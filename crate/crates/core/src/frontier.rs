//! Per-query candidate states and their cost-utility Pareto frontier.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{amortized_state_cost, ModelPool, Query, State};
use crate::money::{Money, Utility};
use crate::router::proxy_utility;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrontierEntry {
    pub state: State,
    /// Amortized per-query cost of the state.
    pub cost: Money,
    /// Proxy utility of the query in this state.
    pub utility: Utility,
}

impl FrontierEntry {
    pub fn new(state: State, cost: Money, utility: Utility) -> Self {
        FrontierEntry { state, cost, utility }
    }
}

/// Non-dominated states of one query, strictly increasing in cost and utility.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FrontierRecord")]
pub struct Frontier {
    pub query_id: String,
    entries: Vec<FrontierEntry>,
}

#[derive(Deserialize)]
struct FrontierRecord {
    query_id: String,
    entries: Vec<FrontierEntry>,
}

impl TryFrom<FrontierRecord> for Frontier {
    type Error = Error;

    fn try_from(r: FrontierRecord) -> Result<Self> {
        Frontier::from_sorted(r.query_id, r.entries)
    }
}

/// `a` dominates `b` when it is no more expensive and no less useful.
/// Identical entries dominate each other.
pub fn dominates(a: &FrontierEntry, b: &FrontierEntry) -> bool {
    a.cost <= b.cost && a.utility >= b.utility
}

// cost ascending, then utility descending, then lower model, then larger batch
fn candidate_order(a: &FrontierEntry, b: &FrontierEntry) -> Ordering {
    a.cost
        .cmp(&b.cost)
        .then(b.utility.cmp(&a.utility))
        .then(a.state.model.cmp(&b.state.model))
        .then(b.state.batch_size.cmp(&a.state.batch_size))
}

impl Frontier {
    /// Prunes `candidates` to the frontier. A candidate survives only if its
    /// utility strictly exceeds every cheaper (or equally cheap, preferred)
    /// candidate's utility.
    pub fn from_candidates(query_id: impl Into<String>, mut candidates: Vec<FrontierEntry>) -> Result<Self> {
        let query_id = query_id.into();
        if candidates.is_empty() {
            return Err(Error::invalid(format!("query {query_id}: no candidate states")));
        }
        candidates.sort_by(candidate_order);
        let mut entries: Vec<FrontierEntry> = Vec::with_capacity(candidates.len());
        for c in candidates {
            if entries.last().is_none_or(|last| c.utility > last.utility) {
                entries.push(c);
            }
        }
        Ok(Frontier { query_id, entries })
    }

    /// Wraps entries that already form a frontier.
    pub fn from_sorted(query_id: impl Into<String>, entries: Vec<FrontierEntry>) -> Result<Self> {
        let query_id = query_id.into();
        if entries.is_empty() {
            return Err(Error::invalid(format!("query {query_id}: empty frontier")));
        }
        if entries
            .windows(2)
            .any(|w| w[1].cost <= w[0].cost || w[1].utility <= w[0].utility)
        {
            return Err(Error::invalid(format!(
                "query {query_id}: frontier must strictly increase in cost and utility"
            )));
        }
        Ok(Frontier { query_id, entries })
    }

    pub fn entries(&self) -> &[FrontierEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cheapest(&self) -> &FrontierEntry {
        &self.entries[0]
    }

    pub fn best(&self) -> &FrontierEntry {
        self.entries.last().expect("nonempty frontier")
    }
}

/// Every usable (model, batch size) pair of a calibrated pool.
pub fn candidate_states(pool: &ModelPool) -> Vec<State> {
    pool.models()
        .iter()
        .enumerate()
        .flat_map(|(k, m)| m.usable_batch_sizes().map(move |b| State::new(k, b)))
        .collect()
}

/// Builds `query`'s frontier over `states` from its estimated unbatched
/// utilities (one per model) and the pool's scaling functions.
pub fn build_frontier(query: &Query, states: &[State], unbatched: &[f64], pool: &ModelPool) -> Result<Frontier> {
    if unbatched.len() != pool.len() {
        return Err(Error::invalid(format!(
            "query {}: {} utility estimates for {} models",
            query.id,
            unbatched.len(),
            pool.len()
        )));
    }
    let candidates = states
        .iter()
        .map(|&s| {
            let m = pool.model(s.model)?;
            let u = proxy_utility(unbatched[s.model], &m.scaling, s.batch_size);
            Ok(FrontierEntry::new(s, amortized_state_cost(query, s, pool)?, Utility::from_fraction(u)))
        })
        .collect::<Result<Vec<_>>>()?;
    Frontier::from_candidates(query.id.clone(), candidates)
}

/// CSV with columns `query,model,batch,cost,utility`; `model` is the pool id
/// when a pool is given, else `m<index+1>`.
pub fn write_frontiers_csv<W: Write>(mut out: W, frontiers: &[Frontier], pool: Option<&ModelPool>) -> std::io::Result<()> {
    writeln!(out, "query,model,batch,cost,utility")?;
    for f in frontiers {
        for e in f.entries() {
            writeln!(
                out,
                "{},{},{},{},{}",
                f.query_id,
                model_label(pool, e.state.model),
                e.state.batch_size,
                e.cost,
                e.utility
            )?;
        }
    }
    Ok(())
}

pub(crate) fn model_label(pool: Option<&ModelPool>, model: usize) -> String {
    pool.and_then(|p| p.models().get(model))
        .map(|m| m.id.clone())
        .unwrap_or_else(|| format!("m{}", model + 1))
}
