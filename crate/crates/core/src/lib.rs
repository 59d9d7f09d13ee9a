//! Energy-aware traffic spreading for small-cell downlinks.
//!
//! Users relay each other's file requests so that the base station keeps more
//! queues non-empty and can exploit multiuser diversity. This crate builds the
//! pieces needed to synthesize and evaluate such dispatching policies:
//!
//! * [`channel`]: discretized Rayleigh-fading channel models and per-slot
//!   fading processes.
//! * [`scheduler`]: greedy, log-rule and LCQ base-station schedulers and the
//!   queue-state-dependent average service rates they induce.
//! * [`mdp`]: the uniformized average-cost dispatching MDP, relative value
//!   iteration, and structural verifiers (switching curves, monotonicity).
//! * [`heuristic`]: the N-user aggregation heuristic built on two-user solves.
//! * [`sim`]: a slotted-time simulator with JSQ / no-reroute baselines and the
//!   BS-side lower-bound scheduler.
//! * [`cluster`]: the large-cell extension with per-cluster time shares.
//!
//! Data-parallel inner loops (Jacobi value-iteration sweeps, rate-table
//! construction, independent simulation batches) run on rayon when the
//! `parallel` feature is enabled and fall back to plain loops otherwise; see
//! [`Execution`].

pub mod channel;
pub mod cluster;
pub mod error;
pub mod heuristic;
pub mod mdp;
pub mod parallel;
pub mod scheduler;
pub mod sim;

pub use channel::{ChannelConfig, ChannelModel, FadingKind, FadingProcess};
pub use cluster::ClusterState;
pub use error::{Error, Result};
pub use heuristic::{DpCache, HeuristicDispatcher};
pub use mdp::{BoundaryRule, CostModel, MdpProblem, MdpSolution, SolveOptions, SwitchingCurves, TwoUserAction};
pub use parallel::Execution;
pub use scheduler::{SchedulerKind, SchedulerPolicy, ServiceRateTable};
pub use sim::{DispatcherKind, ScenarioConfig, SimReport};
