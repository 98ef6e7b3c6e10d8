//! Load-adaptive expert re-layout for expert-parallel MoE training.
//!
//! The crate is organised bottom-up:
//!
//! - [`trace`]: routing matrices, the JSON-lines trace format and a seeded
//!   skewed/drifting trace generator.
//! - [`topology`]: two-tier device/node hierarchy and link bandwidths.
//! - [`cost`]: the communication + computation time objective for a routing
//!   plan, plus closed-form communication volume, memory and overlap analyses.
//! - [`planner`]: replica allocation, topology-aware relocation, lite routing,
//!   the perturbation-set layout search and the static baselines.
//! - [`oracle`]: exact references for tiny instances (allocation by
//!   enumeration, joint layout/routing by enumeration plus min-cost flow).
//! - [`sim`]: one-iteration-lag, trace-driven simulation comparing schedulers.

pub mod cost;
pub mod error;
pub mod oracle;
pub mod planner;
pub mod sim;
pub mod topology;
pub mod trace;
pub mod util;

pub use cost::{time_cost, AnalysisConfig, CostBreakdown, CostParams};
pub use error::{Error, Result};
pub use planner::{ExpertLayout, HistoryMode, LayoutSearch, ReplicaVector, RoutingPlan};
pub use sim::{SchedulerKind, SimReport};
pub use topology::Topology;
pub use trace::{RoutingMatrix, TraceGenSpec, TraceRecord};
