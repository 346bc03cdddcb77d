//! Offline modeling of batched behaviour: coreset extraction, the largest
//! useful batch size, RCU profiling, effective-batch search and fitting of
//! the utility scaling function.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{query_cost, system_prompt_cost, ModelPool, ModelSpec, Query};
use crate::money::{Epsilon, Money, SCALE};
use crate::scaling::{fit_scaling_piecewise, fit_scaling_power_law, ScalingFn};

pub const DEFAULT_CORESET_SIZE: usize = 256;

/// Grid step for batch sizes above 1.
pub const GRID_STEP: u32 = 4;

/// Interval size at which the ternary search switches to a linear scan.
const SCAN_THRESHOLD: usize = 4;

/// Source of realized utilities for a model run at a given batch size.
///
/// Implementations must be deterministic for a fixed (model, batch size,
/// coreset). The coreset is served in consecutive chunks of `batch_size`
/// queries, in the order given.
pub trait BatchUtilityProbe {
    fn probe(&self, model: usize, batch_size: u32, coreset: &[Query]) -> Result<ProbeOutcome>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutcome {
    /// One utility in [0, 1] per coreset query, same order.
    pub utilities: Vec<f64>,
    /// Realized cost of the probe invocations.
    pub cost: Money,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy k-center selection (Gonzalez) under Euclidean distance.
///
/// The first center is the point farthest from the centroid; each next
/// center is the point farthest from its nearest chosen center. Ties go to
/// the lowest index.
pub fn k_center_coreset(embeddings: &[Vec<f64>], m: usize) -> Result<Vec<usize>> {
    let n = embeddings.len();
    if n == 0 {
        return Err(Error::invalid("k-center on empty embedding set"));
    }
    if m == 0 || m > n {
        return Err(Error::invalid(format!("coreset size {m} outside [1, {n}]")));
    }
    let d = embeddings[0].len();
    if let Some(bad) = embeddings.iter().find(|e| e.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, actual: bad.len() });
    }

    let mut centroid = vec![0.0; d];
    for e in embeddings {
        for (c, x) in centroid.iter_mut().zip(e) {
            *c += x;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n as f64);

    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let first = argmax_untaken(embeddings.iter().map(|e| sq_dist(e, &centroid)), &taken);
    chosen.push(first);
    taken[first] = true;

    let mut nearest: Vec<f64> = embeddings.iter().map(|e| sq_dist(e, &embeddings[first])).collect();
    while chosen.len() < m {
        let next = argmax_untaken(nearest.iter().copied(), &taken);
        chosen.push(next);
        taken[next] = true;
        let c = &embeddings[next];
        for (dist, e) in nearest.iter_mut().zip(embeddings) {
            let nd = sq_dist(e, c);
            if nd < *dist {
                *dist = nd;
            }
        }
    }
    Ok(chosen)
}

fn argmax_untaken(values: impl Iterator<Item = f64>, taken: &[bool]) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if taken[i] {
            continue;
        }
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best.expect("at least one untaken point").0
}

/// Largest batch size at which the system prompt still makes up at least an
/// `epsilon` share of a batch's cost: `ceil(C_sys (1 - eps) / (eps E[C_q]))`,
/// never below 1.
pub fn max_batch_size(model: &ModelSpec, expected_query_cost: Money, epsilon: Epsilon) -> Result<u32> {
    if !expected_query_cost.is_positive() {
        return Err(Error::invalid("expected query cost must be positive"));
    }
    let c_sys = i128::from(system_prompt_cost(model).units());
    let eps = i128::from(epsilon.ppb());
    let num = c_sys * (i128::from(SCALE) - eps);
    let den = eps * i128::from(expected_query_cost.units());
    let b = (num + den - 1) / den;
    Ok(b.clamp(1, i128::from(u32::MAX)) as u32)
}

/// Cost per unit of utility of one batched prompt of size `b`:
/// `(C_sys + b E[C_q]) / (b * mean utility)`, in whole money units.
pub fn rcu(model: &ModelSpec, b: u32, mean_query_cost: Money, mean_utility: f64) -> Result<f64> {
    if b == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if !(mean_utility > 0.0) {
        return Err(Error::UtilityCollapse { batch_size: b });
    }
    let batch_cost = system_prompt_cost(model) + mean_query_cost * u64::from(b);
    Ok(batch_cost.to_f64() / (f64::from(b) * mean_utility))
}

/// Batch sizes examined during calibration: the model's explicit grid, or
/// `{1, 4, 8, ...}`, cut at `b_max`.
pub fn candidate_grid(model: &ModelSpec, b_max: u32) -> Vec<u32> {
    if model.explicit_grid {
        model.batch_grid.iter().copied().filter(|&b| b <= b_max).collect()
    } else {
        std::iter::once(1)
            .chain((GRID_STEP..=b_max).step_by(GRID_STEP as usize))
            .collect()
    }
}

fn better(a: f64, b: f64) -> bool {
    a < b
}

/// Index of the minimum of a sequence assumed unimodal (decreasing then
/// increasing), probing `O(log n)` entries. Unreachable entries should
/// evaluate to `+inf`. On ties the lowest index wins. On a sequence that is
/// not unimodal the result is a local minimum.
pub fn ternary_argmin<F>(len: usize, mut eval: F) -> Result<usize>
where
    F: FnMut(usize) -> Result<f64>,
{
    if len == 0 {
        return Err(Error::invalid("empty search range"));
    }
    let (mut lo, mut hi) = (0usize, len - 1);
    while hi - lo + 1 > SCAN_THRESHOLD {
        let third = (hi - lo) / 3;
        let m1 = lo + third;
        let m2 = hi - third;
        let f1 = eval(m1)?;
        let f2 = eval(m2)?;
        if better(f1, f2) {
            hi = m2 - 1;
        } else if better(f2, f1) {
            lo = m1 + 1;
        } else if f1.is_infinite() {
            // both in the collapsed tail
            hi = m1 - 1;
        } else {
            lo = m1;
            hi = m2;
        }
    }
    scan_range(lo, hi, &mut eval)
}

/// Exhaustive counterpart of [`ternary_argmin`].
pub fn scan_argmin<F>(len: usize, mut eval: F) -> Result<usize>
where
    F: FnMut(usize) -> Result<f64>,
{
    if len == 0 {
        return Err(Error::invalid("empty search range"));
    }
    scan_range(0, len - 1, &mut eval)
}

fn scan_range<F>(lo: usize, hi: usize, eval: &mut F) -> Result<usize>
where
    F: FnMut(usize) -> Result<f64>,
{
    let mut best = lo;
    let mut best_v = eval(lo)?;
    for i in lo + 1..=hi {
        let v = eval(i)?;
        if better(v, best_v) {
            best = i;
            best_v = v;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    #[default]
    Ternary,
    Exhaustive,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingKind {
    #[default]
    PiecewiseLinear,
    PowerLaw,
}

/// One probed batch size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RcuSample {
    pub batch_size: u32,
    pub mean_utility: f64,
    /// `None` when the mean utility collapsed to zero.
    pub rcu: Option<f64>,
    pub probe_cost: Money,
}

/// Calibration outcome for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCalibration {
    pub model_id: String,
    pub b_max: u32,
    pub grid: Vec<u32>,
    pub effective_batch_size: u32,
    pub scaling: ScalingFn,
    /// Every probed batch size, ascending.
    pub samples: Vec<RcuSample>,
}

impl ModelCalibration {
    /// Samples with a finite RCU.
    pub fn rcu_samples(&self) -> impl Iterator<Item = &RcuSample> {
        self.samples.iter().filter(|s| s.rcu.is_some())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub epsilon: Epsilon,
    pub coreset_size: usize,
    pub models: Vec<ModelCalibration>,
}

impl CalibrationProfile {
    pub fn model(&self, id: &str) -> Option<&ModelCalibration> {
        self.models.iter().find(|m| m.model_id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CalibrationOptions {
    pub epsilon: Epsilon,
    pub coreset_size: usize,
    pub search: SearchMode,
    pub scaling: ScalingKind,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            epsilon: Epsilon::DEFAULT,
            coreset_size: DEFAULT_CORESET_SIZE,
            search: SearchMode::Ternary,
            scaling: ScalingKind::PiecewiseLinear,
        }
    }
}

fn mean_query_cost(model: &ModelSpec, queries: &[Query]) -> Money {
    let total: Money = queries.iter().map(|q| query_cost(q, model)).sum();
    total.div_round(queries.len() as u64)
}

struct ProbeCache<'a> {
    model: &'a ModelSpec,
    model_index: usize,
    coreset: &'a [Query],
    probe: &'a dyn BatchUtilityProbe,
    mean_cost: Money,
    samples: BTreeMap<u32, RcuSample>,
}

impl ProbeCache<'_> {
    fn sample(&mut self, b: u32) -> Result<&RcuSample> {
        if !self.samples.contains_key(&b) {
            let outcome = self.probe.probe(self.model_index, b, self.coreset)?;
            if outcome.utilities.len() != self.coreset.len() {
                return Err(Error::Probe(format!(
                    "probe returned {} utilities for {} queries",
                    outcome.utilities.len(),
                    self.coreset.len()
                )));
            }
            if outcome.utilities.iter().any(|u| !(0.0..=1.0).contains(u)) {
                return Err(Error::Probe("probe utility outside [0, 1]".into()));
            }
            let mean = outcome.utilities.iter().sum::<f64>() / outcome.utilities.len() as f64;
            let value = match rcu(self.model, b, self.mean_cost, mean) {
                Ok(v) => Some(v),
                Err(Error::UtilityCollapse { .. }) => None,
                Err(e) => return Err(e),
            };
            log::debug!("model {} b={b}: mean utility {mean:.4}, rcu {value:?}", self.model.id);
            self.samples.insert(
                b,
                RcuSample {
                    batch_size: b,
                    mean_utility: mean,
                    rcu: value,
                    probe_cost: outcome.cost,
                },
            );
        }
        Ok(&self.samples[&b])
    }

    fn rcu_or_inf(&mut self, b: u32) -> Result<f64> {
        Ok(self.sample(b)?.rcu.unwrap_or(f64::INFINITY))
    }
}

/// Result of [`calibrate_effective_batch`].
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveBatch {
    pub b_max: u32,
    pub grid: Vec<u32>,
    pub effective_batch_size: u32,
    pub samples: Vec<RcuSample>,
}

/// Picks the grid batch size with the lowest RCU on the coreset.
pub fn calibrate_effective_batch(
    model: &ModelSpec,
    model_index: usize,
    coreset: &[Query],
    probe: &dyn BatchUtilityProbe,
    epsilon: Epsilon,
    search: SearchMode,
) -> Result<EffectiveBatch> {
    let mut cache = new_cache(model, model_index, coreset, probe)?;
    let (b_max, grid, b_effect) = search_effective(&mut cache, epsilon, search)?;
    Ok(EffectiveBatch {
        b_max,
        grid,
        effective_batch_size: b_effect,
        samples: cache.samples.into_values().collect(),
    })
}

fn new_cache<'a>(
    model: &'a ModelSpec,
    model_index: usize,
    coreset: &'a [Query],
    probe: &'a dyn BatchUtilityProbe,
) -> Result<ProbeCache<'a>> {
    if coreset.is_empty() {
        return Err(Error::invalid("calibration needs a nonempty coreset"));
    }
    Ok(ProbeCache {
        model,
        model_index,
        coreset,
        probe,
        mean_cost: mean_query_cost(model, coreset),
        samples: BTreeMap::new(),
    })
}

fn search_effective(
    cache: &mut ProbeCache<'_>,
    epsilon: Epsilon,
    search: SearchMode,
) -> Result<(u32, Vec<u32>, u32)> {
    let model = cache.model;
    // a free model has nothing to amortize; fall back to the smallest positive cost
    let expected = cache.mean_cost.max(Money::from_units(1));
    let b_max = max_batch_size(model, expected, epsilon)?;
    let grid = candidate_grid(model, b_max);
    let idx = match search {
        SearchMode::Ternary => ternary_argmin(grid.len(), |i| cache.rcu_or_inf(grid[i]))?,
        SearchMode::Exhaustive => scan_argmin(grid.len(), |i| cache.rcu_or_inf(grid[i]))?,
    };
    Ok((b_max, grid.clone(), grid[idx]))
}

/// Full per-model calibration: effective batch size plus scaling fit over
/// every grid size up to it.
pub fn calibrate_model(
    model: &ModelSpec,
    model_index: usize,
    coreset: &[Query],
    probe: &dyn BatchUtilityProbe,
    options: &CalibrationOptions,
) -> Result<ModelCalibration> {
    let mut cache = new_cache(model, model_index, coreset, probe)?;
    let (b_max, grid, b_effect) = search_effective(&mut cache, options.epsilon, options.search)?;

    let mut fit_samples = Vec::new();
    for &b in grid.iter().take_while(|&&b| b <= b_effect) {
        fit_samples.push((b, cache.sample(b)?.mean_utility));
    }
    let scaling = match fit_samples.first() {
        Some(&(_, u1)) if u1 > 0.0 => match options.scaling {
            ScalingKind::PiecewiseLinear => fit_scaling_piecewise(&fit_samples)?,
            ScalingKind::PowerLaw if fit_samples.len() >= 3 => fit_scaling_power_law(&fit_samples)?,
            ScalingKind::PowerLaw => fit_scaling_piecewise(&fit_samples)?,
        },
        _ => {
            log::warn!("model {}: zero utility at batch size 1 on the coreset", model.id);
            ScalingFn::Constant
        }
    };

    Ok(ModelCalibration {
        model_id: model.id.clone(),
        b_max,
        grid,
        effective_batch_size: b_effect,
        scaling,
        samples: cache.samples.into_values().collect(),
    })
}

/// Runs the modeling stage for every model of the pool on a k-center coreset
/// of `training`.
pub fn calibrate_pool(
    pool: &ModelPool,
    training: &[Query],
    probe: &dyn BatchUtilityProbe,
    options: &CalibrationOptions,
) -> Result<CalibrationProfile> {
    if training.is_empty() {
        return Err(Error::invalid("calibration needs training queries"));
    }
    let size = options.coreset_size.clamp(1, training.len());
    let embeddings: Vec<Vec<f64>> = training.iter().map(|q| q.embedding.clone()).collect();
    let mut picked = k_center_coreset(&embeddings, size)?;
    // probing order follows the training order
    picked.sort_unstable();
    let coreset: Vec<Query> = picked.iter().map(|&i| training[i].clone()).collect();

    let models = pool
        .models()
        .iter()
        .enumerate()
        .map(|(k, m)| calibrate_model(m, k, &coreset, probe, options))
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationProfile {
        epsilon: options.epsilon,
        coreset_size: size,
        models,
    })
}

/// Installs calibrated grids, effective batch sizes and scaling functions.
pub fn apply_profile(pool: &ModelPool, profile: &CalibrationProfile) -> Result<ModelPool> {
    let mut out = pool.clone();
    for m in out.models_mut() {
        let cal = profile
            .model(&m.id)
            .ok_or_else(|| Error::invalid(format!("profile has no entry for model {}", m.id)))?;
        if cal.grid.first() != Some(&1) || !cal.grid.contains(&cal.effective_batch_size) {
            return Err(Error::invalid(format!("model {}: inconsistent calibrated grid", m.id)));
        }
        let grid: Vec<u32> = cal
            .grid
            .iter()
            .copied()
            .filter(|&b| b <= cal.effective_batch_size)
            .collect();
        let explicit = m.explicit_grid;
        *m = m
            .clone()
            .with_batch_grid(grid)?
            .with_effective_batch_size(cal.effective_batch_size)?
            .with_scaling(cal.scaling.clone());
        m.explicit_grid = explicit;
    }
    ModelPool::new(out.models().to_vec())
}
