//! Greedy budget allocation along per-query frontiers, then packing of the
//! resulting assignment into physical invocations.
//!
//! Every query starts on the cheapest state of its frontier. A max-priority
//! queue holds at most one pending upgrade per query, keyed by the utility
//! gained per unit of extra cost. Popped upgrades that no longer fit the
//! remaining budget are dropped for good.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::Write;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontier::{model_label, Frontier, FrontierEntry};
use crate::model::{batch_group_cost, ModelPool, Query, State};
use crate::money::{Money, Utility};

/// A pending upgrade of one query to the `target`-th entry of its frontier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PqEntry {
    pub query: usize,
    pub target: usize,
    pub gain: Utility,
    pub extra_cost: Money,
}

impl PqEntry {
    /// Utility gained per unit of extra cost.
    pub fn delta(&self) -> f64 {
        self.gain.to_f64() / self.extra_cost.to_f64()
    }

    fn cmp_delta(&self, other: &Self) -> Ordering {
        // gain / cost compared by cross-multiplication; both costs are positive
        let lhs = i128::from(self.gain.units()) * i128::from(other.extra_cost.units());
        let rhs = i128::from(other.gain.units()) * i128::from(self.extra_cost.units());
        lhs.cmp(&rhs)
    }
}

impl Ord for PqEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cmp_delta(other)
            .then_with(|| other.query.cmp(&self.query))
            .then_with(|| other.target.cmp(&self.target))
    }
}

impl PartialOrd for PqEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Utility gain per unit cost of moving from entry `t - 1` to entry `t`.
pub fn delta_slope(frontier: &Frontier, t: usize) -> Result<f64> {
    pending(frontier, 0, t).map(|e| e.delta())
}

fn pending(frontier: &Frontier, query: usize, t: usize) -> Result<PqEntry> {
    let entries = frontier.entries();
    if t == 0 || t >= entries.len() {
        return Err(Error::invalid(format!(
            "query {}: upgrade index {t} outside [1, {})",
            frontier.query_id,
            entries.len()
        )));
    }
    Ok(PqEntry {
        query,
        target: t,
        gain: entries[t].utility - entries[t - 1].utility,
        extra_cost: entries[t].cost - entries[t - 1].cost,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// 1-based count of queue pops.
    pub step: usize,
    /// Index into the assignment's query ids.
    pub query: usize,
    pub state: State,
    pub delta: f64,
    pub budget_after: Money,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedUpgrade {
    pub step: usize,
    pub query: usize,
    pub state: State,
    pub needed: Money,
    pub remaining: Money,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub query_ids: Vec<String>,
    pub states: Vec<State>,
    /// Amortized per-query cost of each assigned state.
    pub costs: Vec<Money>,
    pub utilities: Vec<Utility>,
    pub budget: Money,
    pub remaining_budget: Money,
    pub trace: Vec<TraceStep>,
    pub skipped_upgrades: Vec<SkippedUpgrade>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn total_proxy_utility(&self) -> Utility {
        self.utilities.iter().copied().sum()
    }

    /// Sum of amortized per-query costs, the quantity the budget constrains.
    pub fn amortized_spend(&self) -> Money {
        self.costs.iter().copied().sum()
    }

    /// Trace as CSV: `step,query,model,batch,delta,budget_after`.
    pub fn write_trace_csv<W: Write>(&self, mut out: W, pool: Option<&ModelPool>) -> std::io::Result<()> {
        writeln!(out, "step,query,model,batch,delta,budget_after")?;
        for t in &self.trace {
            writeln!(
                out,
                "{},{},{},{},{:.6},{}",
                t.step,
                self.query_ids[t.query],
                model_label(pool, t.state.model),
                t.state.batch_size,
                t.delta,
                t.budget_after
            )?;
        }
        Ok(())
    }
}

/// Outcome of one queue pop.
#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Committed(TraceStep),
    Skipped(SkippedUpgrade),
}

/// Step-wise greedy scheduler, for callers that want to observe the queue.
pub struct Scheduler<'a> {
    frontiers: &'a [Frontier],
    entries: Vec<FrontierEntry>,
    start: Vec<usize>,
    position: Vec<u32>,
    budget: Money,
    remaining: Money,
    queue: BinaryHeap<PqEntry>,
    pops: usize,
    trace: Vec<TraceStep>,
    skipped: Vec<SkippedUpgrade>,
}

impl<'a> Scheduler<'a> {
    /// Places every query on its cheapest frontier state and queues its first
    /// upgrade. Fails when those states alone exceed the budget.
    pub fn new(frontiers: &'a [Frontier], budget: Money) -> Result<Self> {
        let mut remaining = budget;
        let mut queue = Vec::with_capacity(frontiers.len());
        let mut entries = Vec::new();
        let mut start = Vec::with_capacity(frontiers.len() + 1);
        for (i, f) in frontiers.iter().enumerate() {
            start.push(entries.len());
            entries.extend_from_slice(f.entries());
            if f.is_empty() {
                return Err(Error::invalid(format!("query {}: empty frontier", f.query_id)));
            }
            remaining -= f.cheapest().cost;
            if f.len() > 1 {
                queue.push(pending(f, i, 1)?);
            }
        }
        if remaining < Money::ZERO {
            return Err(Error::BudgetInfeasible { required: budget - remaining, budget });
        }
        start.push(entries.len());
        Ok(Scheduler {
            frontiers,
            entries,
            start,
            position: vec![0; frontiers.len()],
            budget,
            remaining,
            queue: BinaryHeap::from(queue),
            pops: 0,
            trace: Vec::new(),
            skipped: Vec::new(),
        })
    }

    pub fn remaining_budget(&self) -> Money {
        self.remaining
    }

    /// Queue contents, highest priority first.
    pub fn snapshot(&self) -> Vec<PqEntry> {
        let mut v: Vec<PqEntry> = self.queue.iter().copied().collect();
        v.sort_by(|a, b| b.cmp(a));
        v
    }

    pub fn is_done(&self) -> bool {
        self.queue.is_empty() || self.remaining <= Money::ZERO
    }

    /// Pops the best pending upgrade and commits it if affordable.
    pub fn step(&mut self) -> Option<StepOutcome> {
        Some(if self.advance()? {
            StepOutcome::Committed(self.trace.last().expect("just pushed").clone())
        } else {
            StepOutcome::Skipped(self.skipped.last().expect("just pushed").clone())
        })
    }

    fn upgrade(&self, query: usize, target: usize) -> PqEntry {
        let base = self.start[query];
        let (cur, next) = (&self.entries[base + target - 1], &self.entries[base + target]);
        PqEntry { query, target, gain: next.utility - cur.utility, extra_cost: next.cost - cur.cost }
    }

    fn frontier_len(&self, query: usize) -> usize {
        self.start[query + 1] - self.start[query]
    }

    fn advance(&mut self) -> Option<bool> {
        if self.remaining <= Money::ZERO {
            return None;
        }
        let top = self.queue.pop()?;
        let committed = self.apply(top);
        if committed && top.target + 1 < self.frontier_len(top.query) {
            self.queue.push(self.upgrade(top.query, top.target + 1));
        }
        Some(committed)
    }

    /// Commits a popped upgrade if it fits, otherwise drops it.
    fn apply(&mut self, top: PqEntry) -> bool {
        self.pops += 1;
        let state = self.entries[self.start[top.query] + top.target].state;
        if top.extra_cost > self.remaining {
            self.skipped.push(SkippedUpgrade {
                step: self.pops,
                query: top.query,
                state,
                needed: top.extra_cost,
                remaining: self.remaining,
            });
            return false;
        }
        self.remaining -= top.extra_cost;
        self.position[top.query] = top.target as u32;
        self.trace.push(TraceStep {
            step: self.pops,
            query: top.query,
            state,
            delta: top.delta(),
            budget_after: self.remaining,
        });
        true
    }

    /// Runs the remaining pops to completion.
    ///
    /// Instead of popping the queue, every upgrade still reachable is sorted
    /// once by priority and swept in that order. An upgrade whose predecessor
    /// is still pending is passed over; once the predecessor is applied, any
    /// successor already passed over outranks everything left and is applied
    /// at once, which is exactly when the queue would pop it.
    pub fn finish(mut self) -> Assignment {
        let mut pending: Vec<PqEntry> = Vec::new();
        for e in std::mem::take(&mut self.queue).into_vec() {
            pending.extend((e.target..self.frontier_len(e.query)).map(|t| self.upgrade(e.query, t)));
        }
        pending.sort_unstable_by(|a, b| b.cmp(a));
        'sweep: for e in pending {
            if self.position[e.query] as usize + 1 != e.target {
                continue;
            }
            let mut cur = e;
            loop {
                if self.remaining <= Money::ZERO {
                    break 'sweep;
                }
                if !self.apply(cur) || cur.target + 1 == self.frontier_len(cur.query) {
                    break;
                }
                let next = self.upgrade(cur.query, cur.target + 1);
                if next < e {
                    break;
                }
                cur = next;
            }
        }
        let chosen: Vec<_> = self
            .start
            .iter()
            .zip(&self.position)
            .map(|(&base, &p)| self.entries[base + p as usize])
            .collect();
        Assignment {
            query_ids: self.frontiers.iter().map(|f| f.query_id.clone()).collect(),
            states: chosen.iter().map(|e| e.state).collect(),
            costs: chosen.iter().map(|e| e.cost).collect(),
            utilities: chosen.iter().map(|e| e.utility).collect(),
            budget: self.budget,
            remaining_budget: self.remaining,
            trace: self.trace,
            skipped_upgrades: self.skipped,
        }
    }
}

impl Assignment {
    /// Assignment that puts query `i` on entry `positions[i]` of its
    /// frontier, with an empty trace.
    pub fn from_positions(frontiers: &[Frontier], positions: &[usize], budget: Money) -> Result<Self> {
        if positions.len() != frontiers.len() {
            return Err(Error::invalid("one position per frontier required"));
        }
        let chosen = frontiers
            .iter()
            .zip(positions)
            .map(|(f, &p)| {
                f.entries()
                    .get(p)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("query {}: no frontier entry {p}", f.query_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let spent: Money = chosen.iter().map(|e| e.cost).sum();
        Ok(Assignment {
            query_ids: frontiers.iter().map(|f| f.query_id.clone()).collect(),
            states: chosen.iter().map(|e| e.state).collect(),
            costs: chosen.iter().map(|e| e.cost).collect(),
            utilities: chosen.iter().map(|e| e.utility).collect(),
            budget,
            remaining_budget: budget - spent,
            trace: Vec::new(),
            skipped_upgrades: Vec::new(),
        })
    }
}

/// Runs the greedy schedule to completion.
pub fn greedy_schedule(frontiers: &[Frontier], budget: Money) -> Result<Assignment> {
    Ok(Scheduler::new(frontiers, budget)?.finish())
}

/// One physical invocation: up to `batch_size` queries (by index) sent
/// together to `model`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationBatch {
    pub model: usize,
    pub batch_size: u32,
    pub members: Vec<usize>,
}

/// Groups queries by assigned state and chunks each group, in query order,
/// into batches of the state's size. Only the last batch of a group may be
/// partial.
pub fn pack_batches(assignment: &Assignment) -> Vec<InvocationBatch> {
    let mut groups: BTreeMap<State, Vec<usize>> = BTreeMap::new();
    for (i, s) in assignment.states.iter().enumerate() {
        groups.entry(*s).or_default().push(i);
    }
    let mut out = Vec::new();
    for (state, members) in groups {
        for chunk in members.chunks(state.batch_size as usize) {
            out.push(InvocationBatch {
                model: state.model,
                batch_size: state.batch_size,
                members: chunk.to_vec(),
            });
        }
    }
    out
}

/// Realized cost of the batches: one system prompt per invocation plus each
/// member's own token cost. `queries` is indexed like the assignment.
pub fn exact_spend(batches: &[InvocationBatch], pool: &ModelPool, queries: &[Query]) -> Result<Money> {
    let mut total = Money::ZERO;
    for b in batches {
        if b.members.len() > b.batch_size as usize {
            return Err(Error::invalid("batch holds more members than its size"));
        }
        let m = pool.model(b.model)?;
        let members = b
            .members
            .iter()
            .map(|&i| queries.get(i).ok_or_else(|| Error::invalid(format!("unknown query index {i}"))))
            .collect::<Result<Vec<_>>>()?;
        total += batch_group_cost(m, b.batch_size, members);
    }
    Ok(total)
}

/// Amortized spend of the batches without rounding: each member pays
/// `C_sys / b + C_q` exactly. Equal to [`exact_spend`] iff every batch is full.
pub fn amortized_spend_exact(batches: &[InvocationBatch], pool: &ModelPool, queries: &[Query]) -> Result<Ratio<i128>> {
    let mut total = Ratio::from_integer(0i128);
    for b in batches {
        let m = pool.model(b.model)?;
        let c_sys = i128::from(crate::model::system_prompt_cost(m).units());
        for &i in &b.members {
            let q = queries.get(i).ok_or_else(|| Error::invalid(format!("unknown query index {i}")))?;
            total += Ratio::new(c_sys, i128::from(b.batch_size))
                + Ratio::from_integer(i128::from(crate::model::query_cost(q, m).units()));
        }
    }
    Ok(total)
}
