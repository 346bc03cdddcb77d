//! Exhaustive solver for small routing instances and the max-coverage
//! construction used to show the problem is NP-hard. Both serve as ground
//! truth for tests of the greedy scheduler and the frontier pruning.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontier::Frontier;
use crate::model::State;
use crate::money::{Money, Utility, SCALE};

pub const DEFAULT_ORACLE_CAP: u128 = 5_000_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Sum of per-query amortized costs.
    #[default]
    Amortized,
    /// Per (model, batch size) group: one system prompt per started batch
    /// plus every member's own cost.
    ExactEq4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactOption {
    pub state: State,
    /// Amortized per-query cost, used in [`CostMode::Amortized`].
    pub cost: Money,
    /// The query's own token cost, used in [`CostMode::ExactEq4`].
    #[serde(default)]
    pub query_cost: Money,
    pub utility: Utility,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactInstance {
    /// Candidate options per query.
    pub queries: Vec<Vec<ExactOption>>,
    /// System prompt cost per model index, needed by [`CostMode::ExactEq4`].
    #[serde(default)]
    pub system_prompt_costs: Vec<Money>,
    pub budget: Money,
    pub cost_mode: CostMode,
}

impl ExactInstance {
    /// Amortized-mode instance over the entries of each frontier.
    pub fn from_frontiers(frontiers: &[Frontier], budget: Money) -> Self {
        ExactInstance {
            queries: frontiers
                .iter()
                .map(|f| {
                    f.entries()
                        .iter()
                        .map(|e| ExactOption { state: e.state, cost: e.cost, query_cost: Money::ZERO, utility: e.utility })
                        .collect()
                })
                .collect(),
            system_prompt_costs: Vec::new(),
            budget,
            cost_mode: CostMode::Amortized,
        }
    }

    /// Number of assignments in the search space.
    pub fn search_space(&self) -> u128 {
        self.queries
            .iter()
            .try_fold(1u128, |acc, q| acc.checked_mul(q.len() as u128))
            .unwrap_or(u128::MAX)
    }

    fn validate(&self) -> Result<()> {
        if let Some(i) = self.queries.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("query {i} has no options")));
        }
        if self.cost_mode == CostMode::ExactEq4 {
            for opt in self.queries.iter().flatten() {
                if opt.state.model >= self.system_prompt_costs.len() {
                    return Err(Error::invalid(format!(
                        "no system prompt cost for model {}",
                        opt.state.model
                    )));
                }
                if opt.state.batch_size == 0 {
                    return Err(Error::invalid("batch size must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactSolution {
    pub utility: Utility,
    pub cost: Money,
    /// Option index per query; the lexicographically smallest optimum.
    pub choice: Vec<usize>,
}

impl ExactSolution {
    pub fn states(&self, instance: &ExactInstance) -> Vec<State> {
        self.choice
            .iter()
            .zip(&instance.queries)
            .map(|(&c, opts)| opts[c].state)
            .collect()
    }
}

struct Search<'a> {
    inst: &'a ExactInstance,
    /// Group id of each option, ExactEq4 mode only.
    group_of: Vec<Vec<usize>>,
    group_state: Vec<State>,
    counts: Vec<u64>,
    /// Best achievable utility from query i onward.
    suffix_best: Vec<Utility>,
    current: Vec<usize>,
    best: Option<ExactSolution>,
}

impl Search<'_> {
    fn step_cost(&self, q: usize, o: usize) -> Money {
        let opt = &self.inst.queries[q][o];
        match self.inst.cost_mode {
            CostMode::Amortized => opt.cost,
            CostMode::ExactEq4 => {
                let g = self.group_of[q][o];
                let s = self.group_state[g];
                let opening = if self.counts[g] % u64::from(s.batch_size) == 0 {
                    self.inst.system_prompt_costs[s.model]
                } else {
                    Money::ZERO
                };
                opening + opt.query_cost
            }
        }
    }

    fn dfs(&mut self, q: usize, cost: Money, utility: Utility) {
        if q == self.inst.queries.len() {
            if self.best.as_ref().is_none_or(|b| utility > b.utility) {
                self.best = Some(ExactSolution { utility, cost, choice: self.current.clone() });
            }
            return;
        }
        if let Some(b) = &self.best {
            if utility + self.suffix_best[q] <= b.utility {
                return;
            }
        }
        for o in 0..self.inst.queries[q].len() {
            let next_cost = cost + self.step_cost(q, o);
            // costs only grow along a branch, in both modes
            if next_cost > self.inst.budget {
                continue;
            }
            let eq4 = self.inst.cost_mode == CostMode::ExactEq4;
            if eq4 {
                self.counts[self.group_of[q][o]] += 1;
            }
            self.current[q] = o;
            self.dfs(q + 1, next_cost, utility + self.inst.queries[q][o].utility);
            if eq4 {
                self.counts[self.group_of[q][o]] -= 1;
            }
        }
    }
}

/// Exhaustively finds the maximum total utility within budget.
///
/// Fails with [`Error::OracleCapExceeded`] when the product of option counts
/// exceeds `cap`, and with [`Error::NoFeasibleAssignment`] when no
/// assignment fits the budget.
pub fn exact_solve(instance: &ExactInstance, cap: u128) -> Result<ExactSolution> {
    instance.validate()?;
    let size = instance.search_space();
    if size > cap {
        return Err(Error::OracleCapExceeded { size, cap });
    }

    let mut groups: BTreeMap<State, usize> = BTreeMap::new();
    let group_of: Vec<Vec<usize>> = instance
        .queries
        .iter()
        .map(|opts| {
            opts.iter()
                .map(|o| {
                    let next = groups.len();
                    *groups.entry(o.state).or_insert(next)
                })
                .collect()
        })
        .collect();
    let mut group_state = vec![State::new(0, 1); groups.len()];
    for (s, g) in &groups {
        group_state[*g] = *s;
    }

    let n = instance.queries.len();
    let mut suffix_best = vec![Utility::ZERO; n + 1];
    for i in (0..n).rev() {
        let top = instance.queries[i].iter().map(|o| o.utility).max().unwrap_or(Utility::ZERO);
        suffix_best[i] = suffix_best[i + 1] + top;
    }

    let mut search = Search {
        inst: instance,
        group_of,
        counts: vec![0; group_state.len()],
        group_state,
        suffix_best,
        current: vec![0; n],
        best: None,
    };
    search.dfs(0, Money::ZERO, Utility::ZERO);
    search
        .best
        .ok_or(Error::NoFeasibleAssignment { budget: instance.budget })
}

/// Max-coverage instance: pick at most `budget` of the `sets` to cover as
/// many of the `elements` (numbered `0..elements`) as possible.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxCoverage {
    pub elements: usize,
    pub sets: Vec<Vec<usize>>,
    pub budget: usize,
}

pub const MAX_COVERAGE_SET_LIMIT: usize = 20;

impl MaxCoverage {
    pub fn new(elements: usize, sets: Vec<Vec<usize>>, budget: usize) -> Result<Self> {
        let mc = MaxCoverage { elements, sets, budget };
        mc.validate()?;
        Ok(mc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget > self.sets.len() {
            return Err(Error::invalid("budget exceeds the number of sets"));
        }
        let mut seen = vec![false; self.elements];
        for set in &self.sets {
            for &e in set {
                *seen
                    .get_mut(e)
                    .ok_or_else(|| Error::invalid(format!("element {e} out of range")))? = true;
            }
        }
        if let Some(e) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("element {e} is in no set")));
        }
        Ok(())
    }
}

/// Encodes a max-coverage instance as a routing instance: one query per
/// element, one model per set, a single batch size equal to the element
/// count, unit system-prompt cost, free queries, and utility 1 exactly when
/// the element belongs to the set. The budget is the set budget, so total
/// cost equals the number of models used.
pub fn reduce_max_coverage(mc: &MaxCoverage) -> Result<ExactInstance> {
    mc.validate()?;
    let n = mc.elements;
    let batch = u32::try_from(n.max(1)).map_err(|_| Error::invalid("too many elements"))?;
    let members: Vec<BTreeSet<usize>> = mc.sets.iter().map(|s| s.iter().copied().collect()).collect();
    let queries = (0..n)
        .map(|i| {
            members
                .iter()
                .enumerate()
                .map(|(k, set)| ExactOption {
                    state: State::new(k, batch),
                    cost: Money::from_units(SCALE / i64::from(batch)),
                    query_cost: Money::ZERO,
                    utility: if set.contains(&i) { Utility::ONE } else { Utility::ZERO },
                })
                .collect()
        })
        .collect();
    Ok(ExactInstance {
        queries,
        system_prompt_costs: vec![Money::from_units(SCALE); mc.sets.len()],
        budget: Money::from_units(SCALE * mc.budget as i64),
        cost_mode: CostMode::ExactEq4,
    })
}

/// Best coverage over every choice of `min(budget, K)` sets.
pub fn brute_force_max_coverage(mc: &MaxCoverage) -> Result<usize> {
    mc.validate()?;
    let k = mc.sets.len();
    if k > MAX_COVERAGE_SET_LIMIT {
        return Err(Error::invalid(format!("brute force supports at most {MAX_COVERAGE_SET_LIMIT} sets")));
    }
    let pick = mc.budget.min(k);
    let masks: Vec<u64> = mc
        .sets
        .iter()
        .map(|s| s.iter().fold(0u64, |m, &e| m | (1u64 << (e % 64))))
        .collect();
    if mc.elements > 64 {
        return Ok(brute_force_sets(mc, pick));
    }
    let mut best = 0;
    for subset in 0u32..(1u32 << k) {
        if subset.count_ones() as usize != pick {
            continue;
        }
        let covered = (0..k)
            .filter(|&j| subset & (1 << j) != 0)
            .fold(0u64, |m, j| m | masks[j]);
        best = best.max(covered.count_ones() as usize);
    }
    Ok(best)
}

fn brute_force_sets(mc: &MaxCoverage, pick: usize) -> usize {
    let k = mc.sets.len();
    let mut best = 0;
    for subset in 0u32..(1u32 << k) {
        if subset.count_ones() as usize != pick {
            continue;
        }
        let covered: BTreeSet<usize> = (0..k)
            .filter(|&j| subset & (1 << j) != 0)
            .flat_map(|j| mc.sets[j].iter().copied())
            .collect();
        best = best.max(covered.len());
    }
    best
}
