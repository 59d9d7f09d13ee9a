//! Slotted-time simulation of a BS and its users.
//!
//! Requests arrive as Poisson processes at exact timestamps; the dispatcher
//! picks the queue a new file joins when it is requested, and every slot the
//! BS serves the head-of-line file of one queue at that user's instantaneous
//! rate. Statistics come from independent replications ("batches") with a
//! discarded warm-up, added in doubling rounds until the requested relative
//! precision is reached.

mod engine;
mod lower_bound;
mod stats;

use serde::{Deserialize, Serialize};

use crate::channel::{discretize, ChannelConfig, ChannelModel, FadingKind};
use crate::error::{invalid, Result};
use crate::mdp::{CostModel, MdpProblem, INFEASIBLE};
use crate::parallel::{map_indexed, Execution};
use crate::scheduler::{SchedulerPolicy, ServiceRateTable, TableOptions};

pub use lower_bound::{lower_bound_schedule, LowerBoundBranch, LowerBoundDecision, LowerBoundState};
pub use stats::{t_interval, Estimate};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DispatcherKind {
    /// Every request goes straight to its owner's queue.
    #[default]
    None,
    /// Join the queue with the least remaining work.
    Jsq,
    /// The solved MDP policy over all users (or over each cluster).
    Optimal,
    /// The aggregation heuristic over two-user solves.
    Heuristic,
    /// User-side spreading plus BS-side rerouting of the lower-bound rule.
    LowerBound,
}

impl DispatcherKind {
    pub fn label(self) -> &'static str {
        match self {
            DispatcherKind::None => "none",
            DispatcherKind::Jsq => "jsq",
            DispatcherKind::Optimal => "optimal",
            DispatcherKind::Heuristic => "heuristic",
            DispatcherKind::LowerBound => "lower-bound",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSpec {
    pub distance_m: f64,
    /// Requests per second; zero for a pure relay.
    pub arrival_rate: f64,
    #[serde(default = "default_file_bytes")]
    pub mean_file_bytes: f64,
    /// Planar position with the BS at the origin, used to form clusters.
    #[serde(default)]
    pub position_m: Option<[f64; 2]>,
    /// Replaces the Rayleigh model at `distance_m` by a two-state channel.
    #[serde(default)]
    pub on_off: Option<OnOffSpec>,
}

/// Channel that is off with probability `1 − p_on` and otherwise supports
/// the rate of `on_snr` over the configured bandwidth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnOffSpec {
    pub p_on: f64,
    pub on_snr: f64,
}

fn default_file_bytes() -> f64 {
    1e6
}

/// Dispatch costs. `φ` scales with the owner's mean file size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSpec {
    pub eta_s: f64,
    pub phi_j_per_mb: f64,
    /// Weight applied to every ordered pair unless `weights` is given.
    pub weight: f64,
    pub weights: Option<Vec<Vec<f64>>>,
}

impl Default for CostSpec {
    fn default() -> Self {
        CostSpec {
            eta_s: 0.0,
            phi_j_per_mb: 1.0,
            weight: 0.0,
            weights: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoppingRule {
    /// Target half-width relative to the mean, for delay and power.
    pub relative_half_width: f64,
    pub confidence: f64,
    pub min_batches: usize,
    pub max_batches: usize,
    /// Slots per batch, warm-up included.
    pub batch_slots: u64,
    pub warmup_fraction: f64,
}

impl Default for StoppingRule {
    fn default() -> Self {
        StoppingRule {
            relative_half_width: 0.02,
            confidence: 0.95,
            min_batches: 10,
            max_batches: 640,
            batch_slots: 2_000_000,
            warmup_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSpec {
    /// Explicit partition; formed from positions when absent.
    pub groups: Option<Vec<Vec<usize>>>,
    pub comm_range_m: f64,
    pub num_heads: usize,
    /// Slots per time-share re-estimate.
    pub window_slots: u64,
    /// Re-solve a cluster's policy when its share moves by more than this.
    pub resolve_threshold: f64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            groups: None,
            comm_range_m: 100.0,
            num_heads: 2,
            window_slots: 100_000,
            resolve_threshold: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub users: Vec<UserSpec>,
    #[serde(default = "ChannelConfig::table_one")]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub fading: FadingKind,
    #[serde(default)]
    pub scheduler: SchedulerPolicy,
    #[serde(default)]
    pub dispatcher: DispatcherKind,
    #[serde(default)]
    pub costs: CostSpec,
    /// Local links unusable: nobody reroutes.
    #[serde(default)]
    pub local_link_congested: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stopping: StoppingRule,
    /// Per-queue box of the MDP behind the `optimal` dispatcher; defaults by
    /// user count (40 for two users, 20 for three).
    #[serde(default)]
    pub truncation: Option<u32>,
    /// Box of the heuristic's two-user solves.
    #[serde(default = "default_heuristic_truncation")]
    pub heuristic_truncation: u32,
    /// Files in system beyond which the run is declared unstable.
    #[serde(default = "default_max_backlog")]
    pub max_backlog: usize,
    #[serde(default)]
    pub cluster: Option<ClusterSpec>,
    #[serde(default)]
    pub execution: Execution,
}

fn default_heuristic_truncation() -> u32 {
    30
}

fn default_max_backlog() -> usize {
    5000
}

/// MDP box used when none is configured.
pub fn default_truncation(num_users: usize) -> u32 {
    match num_users {
        0..=2 => 40,
        3 => 20,
        4 => 10,
        _ => 6,
    }
}

impl ScenarioConfig {
    /// `n` identical users with the default small-cell radio.
    pub fn homogeneous(n: usize, distance_m: f64, arrival_rate: f64) -> Self {
        ScenarioConfig {
            users: (0..n)
                .map(|_| UserSpec {
                    distance_m,
                    arrival_rate,
                    mean_file_bytes: default_file_bytes(),
                    position_m: None,
                    on_off: None,
                })
                .collect(),
            channel: ChannelConfig::table_one(),
            fading: FadingKind::Iid,
            scheduler: SchedulerPolicy::greedy(),
            dispatcher: DispatcherKind::None,
            costs: CostSpec::default(),
            local_link_congested: false,
            seed: 1,
            stopping: StoppingRule::default(),
            truncation: None,
            heuristic_truncation: default_heuristic_truncation(),
            max_backlog: default_max_backlog(),
            cluster: None,
            execution: Execution::default(),
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn file_bits(&self) -> Vec<f64> {
        self.users.iter().map(|u| 8.0 * u.mean_file_bytes).collect()
    }

    /// Per-user channel models.
    pub fn channel_models(&self) -> Result<Vec<ChannelModel>> {
        self.users
            .iter()
            .map(|u| match u.on_off {
                Some(o) => ChannelModel::on_off(self.channel.bandwidth_hz, o.p_on, o.on_snr),
                None => discretize(&self.channel, u.distance_m),
            })
            .collect()
    }

    pub fn arrival_rates(&self) -> Vec<f64> {
        self.users.iter().map(|u| u.arrival_rate).collect()
    }

    /// Field-level validation.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_users();
        if n == 0 {
            return Err(invalid("users: at least one user is required"));
        }
        self.channel.validate()?;
        for (i, u) in self.users.iter().enumerate() {
            if !(u.distance_m > 0.0 && u.distance_m.is_finite()) {
                return Err(invalid(format!("users[{i}].distance_m must be positive, got {}", u.distance_m)));
            }
            if !(u.arrival_rate >= 0.0 && u.arrival_rate.is_finite()) {
                return Err(invalid(format!(
                    "users[{i}].arrival_rate must be non-negative, got {}",
                    u.arrival_rate
                )));
            }
            if let Some(o) = u.on_off {
                if !(0.0..=1.0).contains(&o.p_on) || !(o.on_snr >= 0.0 && o.on_snr.is_finite()) {
                    return Err(invalid(format!(
                        "users[{i}].on_off needs p_on in [0, 1] and a non-negative on_snr"
                    )));
                }
            }
            if !(u.mean_file_bytes > 0.0 && u.mean_file_bytes.is_finite()) {
                return Err(invalid(format!(
                    "users[{i}].mean_file_bytes must be positive, got {}",
                    u.mean_file_bytes
                )));
            }
        }
        if self.users.iter().all(|u| u.arrival_rate == 0.0) {
            return Err(invalid("users: at least one user must generate requests"));
        }
        self.scheduler.validate(n)?;
        let c = &self.costs;
        if !(c.eta_s >= 0.0 && c.phi_j_per_mb >= 0.0 && c.weight >= 0.0) {
            return Err(invalid("costs: eta_s, phi_j_per_mb and weight must be non-negative"));
        }
        if let Some(w) = &c.weights {
            if w.len() != n || w.iter().any(|r| r.len() != n) {
                return Err(invalid(format!("costs.weights must be a {n}x{n} matrix")));
            }
        }
        let s = &self.stopping;
        if !(s.relative_half_width > 0.0) {
            return Err(invalid("stopping.relative_half_width must be positive"));
        }
        if !(s.confidence > 0.0 && s.confidence < 1.0) {
            return Err(invalid("stopping.confidence must lie in (0, 1)"));
        }
        if s.min_batches < 2 || s.max_batches < s.min_batches {
            return Err(invalid("stopping: need 2 <= min_batches <= max_batches"));
        }
        if s.batch_slots < 10 {
            return Err(invalid("stopping.batch_slots is too small"));
        }
        if !(0.0..1.0).contains(&s.warmup_fraction) {
            return Err(invalid("stopping.warmup_fraction must lie in [0, 1)"));
        }
        if let Some(cl) = &self.cluster {
            if cl.groups.is_none() && self.users.iter().any(|u| u.position_m.is_none()) {
                return Err(invalid("cluster: positions are required when groups are not given"));
            }
            if cl.window_slots == 0 {
                return Err(invalid("cluster.window_slots must be positive"));
            }
        }
        if matches!(self.dispatcher, DispatcherKind::Heuristic) && self.scheduler.is_queue_aware() {
            return Err(invalid("dispatcher: the heuristic needs a queue-unaware (greedy) scheduler"));
        }
        Ok(())
    }

    /// Costs in SI units; pairs in different clusters are infeasible.
    pub fn cost_model(&self, cluster_of: Option<&[usize]>) -> Result<CostModel> {
        let n = self.num_users();
        let bits = self.file_bits();
        let mut eta = vec![vec![0.0; n]; n];
        let mut phi = vec![vec![0.0; n]; n];
        let mut weights = vec![vec![0.0; n]; n];
        for j in 0..n {
            for i in 0..n {
                if i == j {
                    continue;
                }
                let apart = cluster_of.is_some_and(|c| c[i] != c[j]);
                eta[j][i] = self.costs.eta_s;
                phi[j][i] = if apart {
                    INFEASIBLE
                } else {
                    self.costs.phi_j_per_mb * bits[j] / 8e6
                };
                weights[j][i] = match &self.costs.weights {
                    Some(w) => w[j][i],
                    None => self.costs.weight,
                };
            }
        }
        CostModel::new(eta, phi, weights)
    }
}

/// The dispatching MDP over all users of `config` (clusters ignored), with
/// rates in files/s on a `truncation` box.
pub fn dispatch_problem(config: &ScenarioConfig, truncation: u32) -> Result<MdpProblem> {
    config.validate()?;
    let models = config.channel_models()?;
    let bits = config.file_bits();
    let mut policy = config.scheduler.clone();
    if policy.file_bits.is_empty() {
        policy.file_bits = bits.clone();
    }
    let table = ServiceRateTable::build(
        &policy,
        &models,
        &TableOptions {
            truncation,
            execution: config.execution,
            ..TableOptions::default()
        },
    )?
    .per_file(&bits)?;
    MdpProblem::new(config.arrival_rates(), table, config.cost_model(None)?, truncation)
}

/// One requested file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FileJob {
    pub owner: usize,
    /// Queue the file sits in.
    pub carrier: usize,
    pub size_bits: f64,
    pub remaining_bits: f64,
    pub request_time: f64,
    pub completion_time: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimReport {
    pub dispatcher: DispatcherKind,
    pub mean_delay_s: f64,
    pub delay_half_width_s: f64,
    pub rerouting_power_w: f64,
    pub power_half_width_w: f64,
    /// `[owner][carrier]` rerouted files per second.
    pub reroute_rates: Vec<Vec<f64>>,
    pub mean_total_queue: f64,
    /// `E[|Q|] / |λ|` from the time-averaged number of files in system.
    pub littles_law_delay_s: f64,
    pub littles_half_width_s: f64,
    pub confidence: f64,
    pub target_met: bool,
    pub batches: usize,
    pub slots_simulated: u64,
    /// Total length of the measurement windows.
    pub measured_time_s: f64,
    /// Rerouting energy spent on files requested in the measurement windows.
    pub rerouting_energy_j: f64,
    pub files_measured: u64,
    /// Whole-run counters per owner.
    pub files_generated: Vec<u64>,
    pub files_completed: Vec<u64>,
    pub files_in_system: Vec<u64>,
    /// Offered load relative to the full-occupancy BS throughput.
    pub offered_load: f64,
    /// Measured share of BS slots per cluster (one entry without clusters).
    pub alpha: Vec<f64>,
    pub clusters: Vec<Vec<usize>>,
}

impl SimReport {
    pub fn delay(&self) -> Estimate {
        Estimate {
            mean: self.mean_delay_s,
            half_width: self.delay_half_width_s,
        }
    }

    pub fn power(&self) -> Estimate {
        Estimate {
            mean: self.rerouting_power_w,
            half_width: self.power_half_width_w,
        }
    }

    pub fn littles_law(&self) -> Estimate {
        Estimate {
            mean: self.littles_law_delay_s,
            half_width: self.littles_half_width_s,
        }
    }
}

/// Least remaining work in seconds, ties to `arriving` and then to the lowest
/// index. Unreachable queues carry an infinite workload.
pub fn jsq_dispatch(arriving: usize, workloads_s: &[f64]) -> usize {
    let mut best = arriving;
    for (i, &w) in workloads_s.iter().enumerate() {
        if w < workloads_s[best] {
            best = i;
        }
    }
    best
}

/// Simulates `config` until the stopping rule is met (or `max_batches` is
/// reached, reported through `target_met`).
pub fn run(config: &ScenarioConfig) -> Result<SimReport> {
    config.validate()?;
    let prep = engine::Prepared::new(config)?;
    let s = &config.stopping;
    let mut outcomes: Vec<engine::BatchOutcome> = Vec::new();
    let mut target = s.min_batches;
    loop {
        let start = outcomes.len();
        let fresh = map_indexed(config.execution, target - start, |b| prep.run_batch((start + b) as u64));
        for o in fresh {
            outcomes.push(o?);
        }
        let report = engine::summarize(&prep, &outcomes, s.confidence);
        let ok = |e: Estimate| e.relative_half_width() <= s.relative_half_width;
        let met = ok(report.delay()) && (report.rerouting_power_w == 0.0 || ok(report.power()));
        if met || outcomes.len() >= s.max_batches {
            return Ok(SimReport {
                target_met: met,
                ..report
            });
        }
        target = (2 * outcomes.len()).min(s.max_batches);
    }
}

/// One run per weight with common random numbers, in the order given.
pub fn measure_tradeoff(config: &ScenarioConfig, weights: &[f64]) -> Result<Vec<(f64, SimReport)>> {
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(invalid("weights must be non-negative"));
    }
    weights
        .iter()
        .map(|&w| {
            let mut c = config.clone();
            c.costs.weight = w;
            c.costs.weights = None;
            run(&c).map(|r| (w, r))
        })
        .collect()
}
