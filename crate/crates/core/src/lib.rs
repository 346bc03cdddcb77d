//! Batch-aware LLM routing under a budget.
//!
//! Queries are routed to a (model, batch size) state. Calibration picks an
//! effective batch size per model and fits how accuracy decays with batch
//! size; a kNN router estimates unbatched accuracy; each query's candidate
//! states are pruned to a Pareto frontier; a greedy scheduler spends the
//! budget on the upgrades with the best marginal utility per unit cost.

pub mod calibration;
pub mod error;
pub mod frontier;
pub mod io;
pub mod model;
pub mod money;
pub mod oracle;
pub mod router;
pub mod scaling;
pub mod scheduler;
pub mod simulator;

pub use calibration::{
    apply_profile, calibrate_effective_batch, calibrate_model, calibrate_pool, k_center_coreset, max_batch_size, rcu,
    BatchUtilityProbe, CalibrationOptions, CalibrationProfile, ModelCalibration, ProbeOutcome, ScalingKind,
    SearchMode,
};
pub use error::{Error, Result};
pub use frontier::{build_frontier, candidate_states, Frontier, FrontierEntry};
pub use model::{amortized_state_cost, batch_group_cost, query_cost, system_prompt_cost, ModelPool, ModelSpec, Query, State};
pub use money::{Epsilon, Money, Utility};
pub use oracle::{brute_force_max_coverage, exact_solve, reduce_max_coverage, ExactInstance, MaxCoverage};
pub use router::{estimate_unbatched_utility, proxy_utility, train_router, Metric, Router};
pub use scaling::{fit_scaling_piecewise, fit_scaling_power_law, ScalingFn};
pub use scheduler::{exact_spend, greedy_schedule, pack_batches, Assignment, InvocationBatch, Scheduler};
pub use io::Workload;
pub use simulator::{gen_workload, replay, strategy_states, EvalPoint, Experiment, Solver, Strategy, SyntheticPoolSpec, World};
