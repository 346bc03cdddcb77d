//! Acceptance suite. Run with `cargo test -p robatch-core --test acceptance`.
//! Prints one PASS/FAIL line per criterion and exits nonzero on any failure.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robatch_core::calibration::{
    calibrate_effective_batch, calibrate_pool, max_batch_size, scan_argmin, ternary_argmin, BatchUtilityProbe,
    CalibrationOptions, ProbeOutcome, SearchMode,
};
use robatch_core::frontier::{build_frontier, candidate_states, Frontier, FrontierEntry};
use robatch_core::model::{amortized_state_cost, ModelPool, ModelSpec, Query, State};
use robatch_core::money::{Epsilon, Money, Utility, SCALE};
use robatch_core::oracle::{
    brute_force_max_coverage, exact_solve, reduce_max_coverage, ExactInstance, ExactOption, MaxCoverage,
    DEFAULT_ORACLE_CAP,
};
use robatch_core::scaling::{fit_scaling_piecewise, fit_scaling_power_law, ScalingFn};
use robatch_core::scheduler::{
    amortized_spend_exact, exact_spend, greedy_schedule, pack_batches, Scheduler, StepOutcome,
};
use robatch_core::simulator::{
    gen_workload, Experiment, ExperimentConfig, Strategy, SyntheticModel, SyntheticPoolSpec, WorkloadSpec,
};
use robatch_core::{Error, Result};

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn money(s: &str) -> Money {
    s.parse().unwrap()
}

fn utility(s: &str) -> Utility {
    s.parse().unwrap()
}

fn within(limit: Duration, started: Instant) -> std::result::Result<Duration, String> {
    let took = started.elapsed();
    if took < limit {
        Ok(took)
    } else {
        Err(format!("took {took:?}, limit {limit:?}"))
    }
}

// ---------------------------------------------------------------------------
// 1. running example

/// `(query, [(model 1-based, batch, cost, utility)])` as printed in the
/// running example's frontier table.
const RUNNING_EXAMPLE: [(&str, &[(usize, u32, &str, &str)]); 6] = [
    ("q1", &[(1, 4, "9.8", "0.60"), (1, 2, "10.7", "0.65"), (1, 1, "13.8", "0.67")]),
    (
        "q2",
        &[(1, 4, "10.1", "0.60"), (1, 2, "12.9", "0.63"), (1, 1, "16.8", "0.66"), (2, 2, "17.0", "0.67"), (2, 1, "19.2", "0.69")],
    ),
    ("q3", &[(1, 4, "9.9", "0.59"), (3, 4, "18.9", "0.69"), (3, 1, "23.9", "0.72")]),
    ("q4", &[(1, 4, "10.2", "0.60"), (2, 4, "14.5", "0.63"), (2, 2, "15.1", "0.65"), (2, 1, "19.5", "0.68")]),
    ("q5", &[(1, 4, "10.4", "0.61"), (2, 4, "13.8", "0.66"), (2, 2, "14.9", "0.67"), (3, 1, "20.2", "0.71")]),
    (
        "q6",
        &[(1, 4, "10.3", "0.61"), (1, 2, "13.0", "0.64"), (2, 2, "14.8", "0.66"), (2, 1, "19.0", "0.69"), (3, 1, "24.0", "0.72")],
    ),
];

/// Queue snapshots before each of the first four pops: budget, then
/// `(query, model 1-based, batch, delta)` from the head down.
const SNAPSHOTS: [(&str, [(&str, usize, u32, f64); 6]); 4] = [
    (
        "39.3",
        [("q1", 1, 2, 0.0556), ("q5", 2, 4, 0.0147), ("q3", 3, 4, 0.0111), ("q6", 1, 2, 0.0111), ("q2", 1, 2, 0.0107), ("q4", 2, 4, 0.0070)],
    ),
    (
        "38.4",
        [("q5", 2, 4, 0.0147), ("q3", 3, 4, 0.0111), ("q6", 1, 2, 0.0111), ("q2", 1, 2, 0.0107), ("q4", 2, 4, 0.0070), ("q1", 1, 1, 0.0065)],
    ),
    (
        "35.0",
        [("q3", 3, 4, 0.0111), ("q6", 1, 2, 0.0111), ("q2", 1, 2, 0.0107), ("q5", 2, 2, 0.0091), ("q4", 2, 4, 0.0070), ("q1", 1, 1, 0.0065)],
    ),
    (
        "26.0",
        [("q6", 1, 2, 0.0111), ("q2", 1, 2, 0.0107), ("q5", 2, 2, 0.0091), ("q4", 2, 4, 0.0070), ("q1", 1, 1, 0.0065), ("q3", 3, 1, 0.0060)],
    ),
];

fn running_example() -> Vec<Frontier> {
    RUNNING_EXAMPLE
        .iter()
        .map(|(q, entries)| {
            let entries = entries
                .iter()
                .map(|&(m, b, c, u)| FrontierEntry::new(State::new(m - 1, b), money(c), utility(u)))
                .collect();
            Frontier::from_sorted(*q, entries).unwrap()
        })
        .collect()
}

fn criterion_1() -> Check {
    let started = Instant::now();
    let frontiers = running_example();
    let mut s = Scheduler::new(&frontiers, money("100")).map_err(|e| e.to_string())?;
    let expected_commits = [("q1", State::new(0, 2), "38.4"), ("q5", State::new(1, 4), "35.0"), ("q3", State::new(2, 4), "26.0")];
    for (step, (budget, rows)) in SNAPSHOTS.iter().enumerate() {
        ensure!(s.remaining_budget() == money(budget), "step {step}: budget {} != {budget}", s.remaining_budget());
        let snap = s.snapshot();
        ensure!(snap.len() == rows.len(), "step {step}: queue holds {} entries", snap.len());
        for (got, &(q, m, b, delta)) in snap.iter().zip(rows) {
            let f = &frontiers[got.query];
            let state = f.entries()[got.target].state;
            ensure!(
                f.query_id == q && state == State::new(m - 1, b),
                "step {step}: got {} {state}, expected {q} (m{m}, {b})",
                f.query_id
            );
            ensure!((got.delta() - delta).abs() <= 1e-4, "step {step}: {q} delta {} vs {delta}", got.delta());
        }
        if let Some(&(q, state, after)) = expected_commits.get(step) {
            match s.step() {
                Some(StepOutcome::Committed(t)) => ensure!(
                    frontiers[t.query].query_id == q && t.state == state && t.budget_after == money(after),
                    "commit {}: {} {} -> {}",
                    step + 1,
                    frontiers[t.query].query_id,
                    t.state,
                    t.budget_after
                ),
                other => return Err(format!("step {}: expected a commit, got {other:?}", step + 1)),
            }
        }
    }
    let greedy = greedy_schedule(&frontiers, money("100")).map_err(|e| e.to_string())?;
    let opt = exact_solve(&ExactInstance::from_frontiers(&frontiers, money("100")), DEFAULT_ORACLE_CAP)
        .map_err(|e| e.to_string())?;
    ensure!(opt.utility >= greedy.total_proxy_utility(), "oracle below greedy");
    ensure!(opt.utility >= utility("3.96") && opt.utility <= utility("4.14"), "oracle optimum {} outside [3.96, 4.14]", opt.utility);
    let took = within(Duration::from_secs(1), started)?;
    Ok(format!(
        "budgets 39.3/38.4/35/26, 24 deltas within 1e-4; greedy {} <= optimum {} ({took:.2?})",
        greedy.total_proxy_utility(),
        opt.utility
    ))
}

// ---------------------------------------------------------------------------
// 2. pruning is lossless

fn random_raw_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<ExactOption>>, Money) {
    let n = rng.random_range(1..=6);
    let k = rng.random_range(1..=3);
    let states: Vec<State> = (0..k)
        .flat_map(|m| {
            let sizes = rng.random_range(1..=3);
            let mut grid = vec![1u32, 2, 4, 8];
            grid.truncate(sizes);
            grid.into_iter().map(move |b| State::new(m, b))
        })
        .collect();
    let queries: Vec<Vec<ExactOption>> = (0..n)
        .map(|_| {
            states
                .iter()
                .map(|&state| ExactOption {
                    state,
                    // coarse values so ties and exact duplicates occur
                    cost: Money::from_units(rng.random_range(1..=30) * SCALE / 10),
                    query_cost: Money::ZERO,
                    utility: Utility::from_units(rng.random_range(0..=20) * SCALE / 20),
                })
                .collect()
        })
        .collect();
    let lo: Money = queries.iter().map(|o| o.iter().map(|x| x.cost).min().unwrap()).sum();
    let hi: Money = queries.iter().map(|o| o.iter().map(|x| x.cost).max().unwrap()).sum();
    let budget = Money::from_units(rng.random_range(lo.units()..=hi.units()));
    (queries, budget)
}

fn criterion_2() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..200 {
        let (raw, budget) = random_raw_instance(&mut rng);
        let full = ExactInstance {
            queries: raw.clone(),
            system_prompt_costs: Vec::new(),
            budget,
            cost_mode: robatch_core::oracle::CostMode::Amortized,
        };
        let frontiers: Vec<Frontier> = raw
            .iter()
            .enumerate()
            .map(|(i, opts)| {
                let cands = opts.iter().map(|o| FrontierEntry::new(o.state, o.cost, o.utility)).collect();
                Frontier::from_candidates(format!("q{i}"), cands).unwrap()
            })
            .collect();
        let pruned = ExactInstance::from_frontiers(&frontiers, budget);
        let a = exact_solve(&full, u128::MAX).map_err(|e| format!("case {case}: {e}"))?;
        let b = exact_solve(&pruned, u128::MAX).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(a.utility == b.utility, "case {case}: full {} vs pruned {}", a.utility, b.utility);
    }
    let took = within(Duration::from_secs(60), started)?;
    Ok(format!("200 instances, utility difference 0 on all ({took:.2?})"))
}

// ---------------------------------------------------------------------------
// 3. max-coverage reduction

fn criterion_3() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(1..=5);
        let mut sets: Vec<Vec<usize>> = (0..k)
            .map(|_| (0..n).filter(|_| rng.random_bool(0.35)).collect())
            .collect();
        for e in 0..n {
            if !sets.iter().any(|s| s.contains(&e)) {
                let j = rng.random_range(0..k);
                sets[j].push(e);
            }
        }
        let budget = rng.random_range(1..=k);
        let mc = MaxCoverage::new(n, sets, budget).map_err(|e| e.to_string())?;
        let routed = exact_solve(&reduce_max_coverage(&mc).map_err(|e| e.to_string())?, DEFAULT_ORACLE_CAP)
            .map_err(|e| format!("case {case}: {e}"))?;
        let covered = brute_force_max_coverage(&mc).map_err(|e| e.to_string())?;
        ensure!(
            routed.utility == Utility::from_units(covered as i64 * SCALE),
            "case {case}: routed {} vs covered {covered}",
            routed.utility
        );
    }
    let took = within(Duration::from_secs(30), started)?;
    Ok(format!("100 instances agree ({took:.2?})"))
}

// ---------------------------------------------------------------------------
// 4. calibration search and the batch-size bound

struct CurveProbe {
    utilities: BTreeMap<u32, f64>,
}

impl BatchUtilityProbe for CurveProbe {
    fn probe(&self, _model: usize, batch_size: u32, coreset: &[Query]) -> Result<ProbeOutcome> {
        let u = *self.utilities.get(&batch_size).ok_or_else(|| Error::Probe("off grid".into()))?;
        Ok(ProbeOutcome { utilities: vec![u; coreset.len()], cost: Money::ZERO })
    }
}

fn criterion_4() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    // strictly V-shaped value sequences, searched directly
    for case in 0..50 {
        let len = rng.random_range(1..=40);
        let min = rng.random_range(0..len);
        let mut values = vec![0.0; len];
        values[min] = rng.random_range(0.0..10.0);
        for i in (0..min).rev() {
            values[i] = values[i + 1] + rng.random_range(0.01..5.0);
        }
        for i in min + 1..len {
            values[i] = values[i - 1] + rng.random_range(0.01..5.0);
        }
        let t = ternary_argmin(len, |i| Ok(values[i])).map_err(|e| e.to_string())?;
        let s = scan_argmin(len, |i| Ok(values[i])).map_err(|e| e.to_string())?;
        ensure!(t == s && s == min, "sequence {case}: ternary {t}, scan {s}, planted {min}");
    }

    // full calibration on planted decay curves
    for case in 0..50 {
        let sys = rng.random_range(500..20_000u64);
        let tokens = rng.random_range(5..200u32);
        let alpha = rng.random_range(0.0..0.03);
        let beta = rng.random_range(0.5..2.0);
        let m = ModelSpec::new("m", Money::from_units(1000), Money::from_units(1000), sys)
            .and_then(|m| m.with_batch_grid(std::iter::once(1).chain((4..=64).step_by(4)).collect()))
            .map_err(|e| e.to_string())?;
        let utilities = m
            .batch_grid
            .iter()
            .map(|&b| (b, robatch_core::simulator::planted_decay(alpha, beta, b).max(0.0)))
            .collect();
        let probe = CurveProbe { utilities };
        let coreset = vec![Query::new("c", vec![0.0], tokens, 1).unwrap()];
        let eps = Epsilon::DEFAULT;
        let t = calibrate_effective_batch(&m, 0, &coreset, &probe, eps, SearchMode::Ternary).map_err(|e| e.to_string())?;
        let s = calibrate_effective_batch(&m, 0, &coreset, &probe, eps, SearchMode::Exhaustive).map_err(|e| e.to_string())?;
        ensure!(
            t.effective_batch_size == s.effective_batch_size,
            "curve {case}: ternary {} vs scan {}",
            t.effective_batch_size,
            s.effective_batch_size
        );
    }

    // C_sys (1 - eps) <= eps E[C_q] b_max < C_sys (1 - eps) + eps E[C_q], in exact integers
    for case in 0..1000 {
        let price = rng.random_range(1..=5_000_000i64);
        let sys = rng.random_range(1..=50_000u64);
        let e_q = Money::from_units(rng.random_range(1..=200_000_000_000i64));
        let ppb = rng.random_range(1..1_000_000_000i64);
        let m = ModelSpec::new("m", Money::from_units(price), Money::from_units(price), sys).map_err(|e| e.to_string())?;
        let eps = Epsilon::from_ppb(ppb).map_err(|e| e.to_string())?;
        let b = max_batch_size(&m, e_q, eps).map_err(|e| e.to_string())?;
        let c_sys = i128::from(price) * i128::from(sys);
        let lhs = c_sys * i128::from(1_000_000_000 - ppb);
        let mid = i128::from(ppb) * i128::from(e_q.units()) * i128::from(b);
        let step = i128::from(ppb) * i128::from(e_q.units());
        ensure!(lhs <= mid && mid < lhs + step, "triple {case}: C_sys {c_sys}, E {e_q}, eps {ppb}ppb gives b_max {b}");
    }
    let took = within(Duration::from_secs(10), started)?;
    Ok(format!("100 grids agree with exhaustive scan, 1000 bound checks hold ({took:.2?})"))
}

// ---------------------------------------------------------------------------
// 5. scaling fits

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let grid = [1u32, 4, 8, 12, 16, 20];
        let u1 = rng.random_range(0.05..1.0f64);
        let mut samples = vec![(1u32, u1)];
        let mut last = u1;
        for &b in &grid[1..] {
            last = (last - rng.random_range(0.0..0.1f64)).max(0.0);
            samples.push((b, last));
        }
        let fit = fit_scaling_piecewise(&samples).map_err(|e| e.to_string())?;
        for &(b, u) in &samples {
            let ratio = u / u1;
            ensure!(fit.evaluate(b) == ratio, "case {case}: rho({b}) = {} != {ratio}", fit.evaluate(b));
        }
    }
    let rho = fit_scaling_piecewise(&[(1, 0.8), (4, 0.6)]).map_err(|e| e.to_string())?;
    ensure!((rho.evaluate(2) - 0.9167).abs() <= 1e-4, "rho(2) = {}", rho.evaluate(2));

    let grid = [1u32, 4, 8, 16, 32];
    for (alpha, beta) in [(0.01, 1.0), (0.1 / 31.0, 1.0), (0.002, 1.5), (0.03, 0.5), (0.0005, 2.0)] {
        let samples: Vec<(u32, f64)> = grid
            .iter()
            .map(|&b| (b, 0.9 * robatch_core::simulator::planted_decay(alpha, beta, b)))
            .collect();
        match fit_scaling_power_law(&samples).map_err(|e| e.to_string())? {
            ScalingFn::PowerLaw { alpha: a, beta: b } => ensure!(
                (a - alpha).abs() <= 1e-6 && (b - beta).abs() <= 1e-6,
                "planted ({alpha}, {beta}) fitted ({a}, {b})"
            ),
            other => return Err(format!("power-law fit returned {other:?}")),
        }
    }
    Ok(format!("100 piecewise round trips exact, rho(2) = {:.6}, 5 power laws recovered", rho.evaluate(2)))
}

// ---------------------------------------------------------------------------
// 6. scheduler safety

struct RandomRouting {
    pool: ModelPool,
    queries: Vec<Query>,
    frontiers: Vec<Frontier>,
    budget: Money,
}

fn random_routing(rng: &mut ChaCha8Rng, max_queries: usize) -> RandomRouting {
    let k = rng.random_range(1..=3);
    let mut input = 0i64;
    let mut output = 0i64;
    let models: Vec<ModelSpec> = (0..k)
        .map(|i| {
            input += rng.random_range(1..=2_000_000i64);
            output += rng.random_range(1..=4_000_000i64);
            let mut grid = vec![1u32];
            grid.extend([2u32, 4, 8, 12, 16].into_iter().filter(|_| rng.random_bool(0.5)));
            let top = *grid.last().unwrap();
            let scaling = if rng.random_bool(0.5) {
                let mut knots = vec![(1u32, 1.0)];
                let mut r = 1.0;
                for &b in &grid[1..] {
                    r = (r - rng.random_range(0.0..0.15f64)).max(0.0);
                    knots.push((b, r));
                }
                ScalingFn::PiecewiseLinear { knots }
            } else {
                ScalingFn::PowerLaw { alpha: rng.random_range(0.0..0.05), beta: rng.random_range(0.5..1.5) }
            };
            ModelSpec::new(format!("m{}", i + 1), Money::from_units(input), Money::from_units(output), rng.random_range(10..3000))
                .unwrap()
                .with_batch_grid(grid)
                .unwrap()
                .with_effective_batch_size(top)
                .unwrap()
                .with_scaling(scaling)
        })
        .collect();
    let pool = ModelPool::new(models).unwrap();
    let n = rng.random_range(1..=max_queries);
    let queries: Vec<Query> = (0..n)
        .map(|i| Query::new(format!("q{i}"), vec![0.0], rng.random_range(1..400), rng.random_range(1..100)).unwrap())
        .collect();
    let states = candidate_states(&pool);
    let frontiers: Vec<Frontier> = queries
        .iter()
        .map(|q| {
            let u: Vec<f64> = (0..k).map(|_| (rng.random_range(0..=100) as f64) / 100.0).collect();
            build_frontier(q, &states, &u, &pool).unwrap()
        })
        .collect();
    let lo: Money = frontiers.iter().map(|f| f.cheapest().cost).sum();
    let hi: Money = frontiers.iter().map(|f| f.best().cost).sum();
    let budget = Money::from_units(rng.random_range(lo.units()..=hi.units() + hi.units() / 10));
    RandomRouting { pool, queries, frontiers, budget }
}

fn check_schedule(r: &RandomRouting) -> std::result::Result<(), String> {
    let mut sched = Scheduler::new(&r.frontiers, r.budget).map_err(|e| e.to_string())?;
    let mut current: Vec<Utility> = r.frontiers.iter().map(|f| f.cheapest().utility).collect();
    let mut total: Utility = current.iter().copied().sum();
    let mut last_budget = sched.remaining_budget();
    ensure!(last_budget >= Money::ZERO, "negative budget after initialization");
    while let Some(outcome) = sched.step() {
        ensure!(sched.remaining_budget() >= Money::ZERO, "negative budget");
        if let StepOutcome::Committed(t) = outcome {
            let i = t.query;
            let entry = r.frontiers[i].entries().iter().find(|e| e.state == t.state).unwrap();
            current[i] = entry.utility;
            let next: Utility = current.iter().copied().sum();
            ensure!(next > total, "utility did not increase at step {}", t.step);
            ensure!(t.budget_after < last_budget, "budget column not strictly decreasing at step {}", t.step);
            total = next;
            last_budget = t.budget_after;
        }
    }
    let a = sched.finish();
    ensure!(a.len() == r.queries.len(), "assignment covers {} of {} queries", a.len(), r.queries.len());
    for ((f, s), q) in r.frontiers.iter().zip(&a.states).zip(&r.queries) {
        ensure!(f.entries().iter().any(|e| e.state == *s), "query {}: state {s} off its frontier", q.id);
        r.pool.check_state(*s).map_err(|e| e.to_string())?;
        ensure!(
            amortized_state_cost(q, *s, &r.pool).unwrap() == a.costs[r.queries.iter().position(|x| x.id == q.id).unwrap()],
            "query {}: cost mismatch",
            q.id
        );
    }
    ensure!(a.total_proxy_utility() == total, "final utility differs from the replayed commits");

    let batches = pack_batches(&a);
    let exact = exact_spend(&batches, &r.pool, &r.queries).map_err(|e| e.to_string())?;
    let amortized = amortized_spend_exact(&batches, &r.pool, &r.queries).map_err(|e| e.to_string())?;
    let mut groups: BTreeMap<State, u32> = BTreeMap::new();
    for s in &a.states {
        *groups.entry(*s).or_default() += 1;
    }
    let all_full = groups.iter().all(|(s, n)| n % s.batch_size == 0);
    let exact_r = Ratio::from_integer(i128::from(exact.units()));
    ensure!(exact_r >= amortized, "exact spend {exact} below amortized");
    ensure!((exact_r == amortized) == all_full, "equality {} but all groups full {all_full}", exact_r == amortized);
    Ok(())
}

fn criterion_6() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut gaps = Vec::new();
    let mut full_groups = 0;
    for case in 0..1000 {
        let r = random_routing(&mut rng, 8);
        check_schedule(&r).map_err(|e| format!("case {case}: {e}"))?;
        let greedy = greedy_schedule(&r.frontiers, r.budget).map_err(|e| e.to_string())?;
        if pack_batches(&greedy).iter().all(|b| b.members.len() == b.batch_size as usize) {
            full_groups += 1;
        }
        match exact_solve(&ExactInstance::from_frontiers(&r.frontiers, r.budget), DEFAULT_ORACLE_CAP) {
            Ok(opt) => {
                let g = greedy.total_proxy_utility();
                ensure!(g <= opt.utility, "case {case}: greedy {g} above optimum {}", opt.utility);
                let gap = if opt.utility > Utility::ZERO {
                    (opt.utility - g).to_f64() / opt.utility.to_f64()
                } else {
                    0.0
                };
                gaps.push(gap);
            }
            Err(Error::OracleCapExceeded { .. }) => {}
            Err(e) => return Err(format!("case {case}: {e}")),
        }
    }
    gaps.sort_by(f64::total_cmp);
    let pct = |p: f64| gaps[((gaps.len() - 1) as f64 * p).round() as usize];
    let optimal = gaps.iter().filter(|&&g| g == 0.0).count();
    println!(
        "    relative gap over {} oracle comparisons: {} optimal, median {:.5}, p90 {:.5}, p99 {:.5}, max {:.5}",
        gaps.len(),
        optimal,
        pct(0.5),
        pct(0.9),
        pct(0.99),
        pct(1.0)
    );
    Ok(format!(
        "1000 instances, {} oracle comparisons, {full_groups} with all batches full ({:.2?})",
        gaps.len(),
        started.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// 7. ablation direction and fitted decay

fn synthetic_model(id: &str, price: &str, alpha: f64, competence: f64, sys: u64) -> SyntheticModel {
    SyntheticModel {
        id: id.into(),
        input_price: money(price),
        output_price: money(price),
        system_prompt_tokens: sys,
        alpha,
        beta: 1.0,
        competence,
    }
}

fn optimum(frontiers: &[Frontier], budget: Money) -> std::result::Result<Utility, String> {
    exact_solve(&ExactInstance::from_frontiers(frontiers, budget), u128::MAX)
        .map(|s| s.utility)
        .map_err(|e| e.to_string())
}

fn criterion_7() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..50 {
        let models = vec![
            synthetic_model("small", "0.0001", rng.random_range(0.0..0.02), rng.random_range(0.3..0.7), 2000),
            synthetic_model("mid", "0.0003", rng.random_range(0.0..0.02), rng.random_range(0.5..0.9), 2000),
            synthetic_model("large", "0.001", rng.random_range(0.0..0.02), rng.random_range(0.7..1.0), 2000),
        ];
        let spec = SyntheticPoolSpec {
            models,
            workload: WorkloadSpec {
                n: 69,
                dim: 4,
                clusters: 3,
                difficulty_gradient: rng.random_range(0.0..0.6),
                seed: rng.random(),
                input_tokens: (50, 150),
                output_tokens: (5, 20),
                max_batch: 16,
            },
        };
        let world = gen_workload(&spec).map_err(|e| e.to_string())?;
        let config = ExperimentConfig { train_queries: 64, ..Default::default() };
        let e = Experiment::prepare(world, &config).map_err(|e| e.to_string())?;
        let joint = e.frontiers(Strategy::Robatch).map_err(|e| e.to_string())?;
        let router_only = e.frontiers(Strategy::RouterOnly).map_err(|e| e.to_string())?;
        let batch_only = e.frontiers(Strategy::BatchOnly(0)).map_err(|e| e.to_string())?;
        // router-only dominates batch-only once every query can afford the cheap model unbatched
        let floor: Money = e
            .eval
            .iter()
            .map(|&i| amortized_state_cost(&e.world.queries[i], State::new(0, 1), &e.pool).unwrap())
            .sum();
        let top: Money = joint.iter().map(|f| f.best().cost).sum();
        let budget = Money::from_units(rng.random_range(floor.units()..=floor.units().max(top.units())));
        let a = optimum(&joint, budget)?;
        let b = optimum(&router_only, budget)?;
        let c = optimum(&batch_only, budget)?;
        ensure!(a >= b && b >= c, "case {case}: joint {a}, router-only {b}, batch-only {c} at budget {budget}");
    }

    // fitted decay against the planted curve on a 256-query coreset
    let spec = SyntheticPoolSpec {
        models: vec![
            synthetic_model("small", "0.0001", 0.004, 0.98, 20_000),
            synthetic_model("mid", "0.0003", 0.006, 0.985, 20_000),
            synthetic_model("large", "0.001", 0.008, 0.99, 20_000),
        ],
        workload: WorkloadSpec {
            n: 256,
            dim: 8,
            clusters: 4,
            difficulty_gradient: 0.02,
            seed: 2024,
            input_tokens: (50, 150),
            output_tokens: (5, 20),
            max_batch: 32,
        },
    };
    let world = gen_workload(&spec).map_err(|e| e.to_string())?;
    let profile = calibrate_pool(&world.pool, &world.queries, &world, &CalibrationOptions::default()).map_err(|e| e.to_string())?;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (m, cal) in spec.models.iter().zip(&profile.models) {
        ensure!(cal.effective_batch_size > 1, "model {}: effective batch size 1 leaves nothing to check", m.id);
        for &b in cal.grid.iter().filter(|&&b| b <= cal.effective_batch_size) {
            let planted = m.planted_decay(b);
            let fitted = cal.scaling.evaluate(b);
            let sigma = (planted * (1.0 - planted) / 256.0).sqrt();
            ensure!(
                (fitted - planted).abs() <= 3.0 * sigma,
                "model {} b={b}: fitted {fitted:.4}, planted {planted:.4}, 3 sigma {:.4}",
                m.id,
                3.0 * sigma
            );
            if sigma > 0.0 {
                worst = worst.max((fitted - planted).abs() / sigma);
            }
            checked += 1;
        }
    }
    Ok(format!(
        "50 instances ordered joint >= router-only >= batch-only; {checked} fitted points within 3 sigma (worst {worst:.2} sigma) ({:.2?})",
        started.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// 8. scalability

fn synthetic_frontiers(n: usize, rng: &mut ChaCha8Rng) -> (Vec<Frontier>, Money) {
    let states = [State::new(0, 8), State::new(0, 4), State::new(1, 4), State::new(1, 1), State::new(2, 1)];
    let mut lo = Money::ZERO;
    let mut hi = Money::ZERO;
    let frontiers = (0..n)
        .map(|i| {
            let mut cost = rng.random_range(SCALE..2 * SCALE);
            let mut u = rng.random_range(0..SCALE / 2);
            let entries: Vec<FrontierEntry> = states
                .iter()
                .map(|&s| {
                    let e = FrontierEntry::new(s, Money::from_units(cost), Utility::from_units(u));
                    cost += rng.random_range(1..SCALE);
                    u += rng.random_range(1..SCALE / 10);
                    e
                })
                .collect();
            lo += entries[0].cost;
            hi += entries[4].cost;
            Frontier::from_sorted(format!("q{i}"), entries).unwrap()
        })
        .collect();
    let budget = lo + Money::from_units((hi - lo).units() / 2);
    (frontiers, budget)
}

fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn criterion_8() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sizes = [12_500usize, 25_000, 50_000, 100_000];
    let mut times = Vec::new();
    let mut largest = Duration::ZERO;
    for &n in &sizes {
        let (frontiers, budget) = synthetic_frontiers(n, &mut rng);
        let mut best = Duration::MAX;
        for _ in 0..5 {
            let started = Instant::now();
            let a = greedy_schedule(&frontiers, budget).map_err(|e| e.to_string())?;
            let took = started.elapsed();
            ensure!(a.len() == n && a.remaining_budget >= Money::ZERO, "n={n}: bad assignment");
            std::hint::black_box(a);
            best = best.min(took);
        }
        if n == 100_000 {
            largest = best;
        }
        times.push(best.as_secs_f64());
    }
    ensure!(largest < Duration::from_secs(10), "100k queries took {largest:?}");
    let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
    ensure!(slope <= 1.2, "fitted exponent {slope:.3} > 1.2 (times {times:?})");
    let rss = peak_rss_kib().ok_or("VmHWM unavailable")?;
    ensure!(rss < 1024 * 1024, "peak memory {rss} KiB");
    Ok(format!(
        "100k queries in {largest:.2?}, exponent {slope:.3}, peak memory {} MiB",
        rss / 1024
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("1 golden running example", criterion_1),
        ("2 frontier pruning is lossless", criterion_2),
        ("3 max-coverage reduction", criterion_3),
        ("4 calibration search and batch-size bound", criterion_4),
        ("5 scaling-fit round trips", criterion_5),
        ("6 scheduler safety properties", criterion_6),
        ("7 ablation direction and fitted decay", criterion_7),
        ("8 scalability", criterion_8),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of 8 criteria failed");
        std::process::exit(1);
    }
    println!("all 8 criteria passed");
}
