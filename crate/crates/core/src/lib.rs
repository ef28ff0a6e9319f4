//! Multi-SLO LLM serving: scheduling policies, capacity math and a
//! deterministic cluster simulator.
//!
//! The crate is organised bottom-up:
//!
//! - [`perf_model`] predicts engine iteration time from token batch size and
//!   resident KV-cache tokens, either from an analytic cost model or from a
//!   profiled grid.
//! - [`capacity`] derives the largest batch a server can run under
//!   (TTFT, TPOT, memory) limits and the per-request serving cost for
//!   disaggregated and co-located deployments.
//! - [`workload`] builds request streams: trace ingestion, synthetic length
//!   generators, SLO tier assignment and Poisson arrivals.
//! - [`scheduler`] holds the pure routing and autoscaling decision functions,
//!   plus the Random / Minimal / Chunk baselines.
//! - [`sim`] is the 1 ms tick simulator that executes a workload against a
//!   cluster and produces [`sim::RunMetrics`].
//!
//! All durations are integer microseconds ([`Micros`]).

pub mod capacity;
pub mod perf_model;
pub mod scheduler;
pub mod sim;
pub mod workload;

/// Global simulation time unit: one microsecond.
pub type Micros = u64;

/// One millisecond in [`Micros`].
pub const MS: Micros = 1_000;
/// One second in [`Micros`].
pub const SEC: Micros = 1_000_000;

pub use perf_model::{AnalyticParams, PerfModel, ProfileTable};
pub use workload::{Request, SloTier, TierDistribution};
