use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use super::lower_bound::{lower_bound_schedule, LowerBoundDecision, LowerBoundState};
use super::stats::t_interval;
use super::{default_truncation, jsq_dispatch, DispatcherKind, FileJob, ScenarioConfig, SimReport};
use crate::channel::{ChannelModel, FadingProcess};
use crate::cluster::{form_clusters, AlphaEstimator, ClusterState};
use crate::error::{Error, Result};
use crate::heuristic::{DpCache, HeuristicDispatcher};
use crate::mdp::{solve, CostModel, MdpProblem, MdpSolution, SolveOptions};
use crate::parallel::Execution;
use crate::scheduler::{SchedulerPolicy, ServiceRateTable, TableOptions};

/// Shares are rounded to this grid before a cluster policy is solved, so
/// batches that estimate nearly the same share reuse one solution.
const ALPHA_GRID: f64 = 0.01;

/// A drained batch may run at most this many times its nominal length.
const DRAIN_FACTOR: u64 = 4;

enum LocalPolicy {
    /// Single-user group: nothing to decide.
    Identity,
    Mdp(MdpProblem, MdpSolution),
    Heuristic(HeuristicDispatcher),
}

struct Group {
    members: Vec<usize>,
    lambda: Vec<f64>,
    costs: CostModel,
    /// Rates of the group as a small cell, files/s.
    base_rates: ServiceRateTable,
    heuristic_cache: Arc<DpCache>,
}

pub(super) struct Prepared {
    n: usize,
    models: Vec<ChannelModel>,
    mean_rates: Vec<f64>,
    file_bits: Vec<f64>,
    lambda: Vec<f64>,
    slot_s: f64,
    fading: FadingProcess,
    scheduler: SchedulerPolicy,
    costs: CostModel,
    /// User-side rule; `None` also when local links are congested.
    user_rule: DispatcherKind,
    lower_bound: bool,
    groups: Vec<Group>,
    group_of: Vec<usize>,
    local_index: Vec<usize>,
    /// Whether shares are re-estimated during a batch.
    adaptive: bool,
    window_slots: u64,
    resolve_threshold: f64,
    truncation: Option<u32>,
    policies: Mutex<HashMap<(usize, i64), Arc<LocalPolicy>>>,
    max_backlog: usize,
    batch_slots: u64,
    warmup_slots: u64,
    seed: u64,
    offered_load: f64,
    clusters: Vec<Vec<usize>>,
}

/// Raw sums from one replication.
#[derive(Clone, Debug)]
pub(super) struct BatchOutcome {
    delay_sum: f64,
    delay_count: u64,
    area: f64,
    window_s: f64,
    energy_j: f64,
    reroutes: Vec<u64>,
    slots: u64,
    generated: Vec<u64>,
    completed: Vec<u64>,
    in_system: Vec<u64>,
    served_by_group: Vec<u64>,
    measured_slots: u64,
}

impl Prepared {
    pub(super) fn new(cfg: &ScenarioConfig) -> Result<Self> {
        let n = cfg.num_users();
        let models = cfg.channel_models()?;
        let mean_rates: Vec<f64> = models.iter().map(ChannelModel::mean_rate).collect();
        let file_bits = cfg.file_bits();
        let lambda = cfg.arrival_rates();
        let mut scheduler = cfg.scheduler.clone();
        if scheduler.file_bits.is_empty() {
            scheduler.file_bits = file_bits.clone();
        }

        let clusters = match &cfg.cluster {
            None => ClusterState::from_groups(vec![(0..n).collect()], n)?,
            Some(spec) => match &spec.groups {
                Some(g) => ClusterState::from_groups(g.clone(), n)?,
                None => {
                    let pos: Vec<[f64; 2]> = cfg.users.iter().map(|u| u.position_m.expect("validated")).collect();
                    form_clusters(&pos, spec.comm_range_m, spec.num_heads)?
                }
            },
        };
        let group_of = clusters.membership();
        let costs = cfg.cost_model(cfg.cluster.as_ref().map(|_| group_of.as_slice()))?;
        let mut local_index = vec![0; n];
        let mut groups = Vec::new();
        for members in &clusters.clusters {
            for (k, &u) in members.iter().enumerate() {
                local_index[u] = k;
            }
            let sub_models: Vec<ChannelModel> = members.iter().map(|&u| models[u].clone()).collect();
            let sub_bits: Vec<f64> = members.iter().map(|&u| file_bits[u]).collect();
            let mut sub_policy = scheduler.clone();
            sub_policy.file_bits = sub_bits.clone();
            if !sub_policy.log_rule_a.is_empty() {
                sub_policy.log_rule_a = members.iter().map(|&u| scheduler.log_rule_a[u]).collect();
            }
            let t = cfg.truncation.unwrap_or_else(|| default_truncation(members.len()));
            let table = ServiceRateTable::build(
                &sub_policy,
                &sub_models,
                &TableOptions {
                    truncation: t,
                    ..TableOptions::default()
                },
            )?
            .per_file(&sub_bits)?;
            groups.push(Group {
                members: members.clone(),
                lambda: members.iter().map(|&u| lambda[u]).collect(),
                costs: costs.restrict(members),
                base_rates: table,
                heuristic_cache: Arc::new(DpCache::new(cfg.heuristic_truncation)),
            });
        }

        let full = ServiceRateTable::build(
            &scheduler,
            &models,
            &TableOptions {
                truncation: 1,
                ..TableOptions::default()
            },
        )?;
        let full_bits: f64 = full.rates(&vec![1; n]).iter().sum();
        let offered: f64 = lambda.iter().zip(&file_bits).map(|(l, b)| l * b).sum();

        let user_rule = if cfg.local_link_congested {
            DispatcherKind::None
        } else {
            cfg.dispatcher
        };
        let warmup_slots = (cfg.stopping.batch_slots as f64 * cfg.stopping.warmup_fraction).round() as u64;
        let prep = Prepared {
            n,
            models,
            mean_rates,
            file_bits,
            lambda,
            slot_s: cfg.channel.slot_s,
            fading: FadingProcess::from_config(cfg.fading, &cfg.channel)?,
            scheduler,
            costs,
            user_rule,
            lower_bound: cfg.dispatcher == DispatcherKind::LowerBound,
            adaptive: cfg.cluster.is_some() && clusters.num_clusters() > 1,
            window_slots: cfg.cluster.as_ref().map_or(u64::MAX, |c| c.window_slots),
            resolve_threshold: cfg.cluster.as_ref().map_or(0.0, |c| c.resolve_threshold),
            truncation: cfg.truncation,
            groups,
            group_of,
            local_index,
            policies: Mutex::new(HashMap::new()),
            max_backlog: cfg.max_backlog,
            batch_slots: cfg.stopping.batch_slots,
            warmup_slots: warmup_slots.min(cfg.stopping.batch_slots - 1),
            seed: cfg.seed,
            offered_load: offered / full_bits,
            clusters: clusters.clusters.clone(),
        };
        // Surface solver failures before any simulation starts.
        let alpha0 = prep.initial_alpha();
        for g in 0..prep.groups.len() {
            prep.local_policy(g, alpha0[g])?;
        }
        Ok(prep)
    }

    fn initial_alpha(&self) -> Vec<f64> {
        let l = self.groups.len();
        if self.adaptive {
            vec![1.0 / l as f64; l]
        } else {
            vec![1.0; l]
        }
    }

    fn needs_policy(&self) -> bool {
        matches!(
            self.user_rule,
            DispatcherKind::Optimal | DispatcherKind::Heuristic | DispatcherKind::LowerBound
        )
    }

    fn local_policy(&self, g: usize, alpha: f64) -> Result<Arc<LocalPolicy>> {
        let key = (g, (alpha / ALPHA_GRID).round() as i64);
        if let Some(p) = self.policies.lock().expect("policy lock poisoned").get(&key) {
            return Ok(Arc::clone(p));
        }
        let policy = Arc::new(self.build_policy(g, key.1 as f64 * ALPHA_GRID)?);
        let mut map = self.policies.lock().expect("policy lock poisoned");
        Ok(Arc::clone(map.entry(key).or_insert(policy)))
    }

    fn build_policy(&self, g: usize, alpha: f64) -> Result<LocalPolicy> {
        let group = &self.groups[g];
        if !self.needs_policy() || group.members.len() < 2 {
            return Ok(LocalPolicy::Identity);
        }
        let rates = group.base_rates.scaled(alpha.max(ALPHA_GRID));
        let heuristic = match self.user_rule {
            DispatcherKind::Heuristic => true,
            DispatcherKind::LowerBound => group.members.len() > 2,
            _ => false,
        };
        if heuristic {
            let d = HeuristicDispatcher::new(
                group.lambda.clone(),
                rates,
                group.costs.clone(),
                Arc::clone(&group.heuristic_cache),
            )?;
            return Ok(LocalPolicy::Heuristic(d));
        }
        let t = self
            .truncation
            .unwrap_or_else(|| default_truncation(group.members.len()));
        let problem = MdpProblem::new(group.lambda.clone(), rates, group.costs.clone(), t)?;
        let opts = SolveOptions {
            execution: Execution::Sequential,
            ..SolveOptions::default()
        };
        let solution = solve(&problem, &opts)?;
        Ok(LocalPolicy::Mdp(problem, solution))
    }

    pub(super) fn run_batch(&self, batch: u64) -> Result<BatchOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(batch);
        Batch::new(self)?.run(&mut rng)
    }
}

struct Job {
    file: FileJob,
    extra_delay: f64,
    tagged: bool,
}

struct Batch<'a> {
    p: &'a Prepared,
    queues: Vec<VecDeque<Job>>,
    q: Vec<u32>,
    work: Vec<f64>,
    in_system: usize,
    tagged_pending: u64,
    alpha: Vec<f64>,
    locals: Vec<Arc<LocalPolicy>>,
    window: AlphaEstimator,
    measured: AlphaEstimator,
    out: BatchOutcome,
    w0: f64,
    w1: f64,
    local_q: Vec<u32>,
    workloads: Vec<f64>,
}

impl<'a> Batch<'a> {
    fn new(p: &'a Prepared) -> Result<Self> {
        let n = p.n;
        let l = p.groups.len();
        let alpha = p.initial_alpha();
        let locals = (0..l).map(|g| p.local_policy(g, alpha[g])).collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            p,
            queues: (0..n).map(|_| VecDeque::new()).collect(),
            q: vec![0; n],
            work: vec![0.0; n],
            in_system: 0,
            tagged_pending: 0,
            alpha,
            locals,
            window: AlphaEstimator::new(p.group_of.clone(), l),
            measured: AlphaEstimator::new(p.group_of.clone(), l),
            out: BatchOutcome {
                delay_sum: 0.0,
                delay_count: 0,
                area: 0.0,
                window_s: (p.batch_slots - p.warmup_slots) as f64 * p.slot_s,
                energy_j: 0.0,
                reroutes: vec![0; n * n],
                slots: 0,
                generated: vec![0; n],
                completed: vec![0; n],
                in_system: vec![0; n],
                served_by_group: vec![0; l],
                measured_slots: 0,
            },
            w0: p.warmup_slots as f64 * p.slot_s,
            w1: p.batch_slots as f64 * p.slot_s,
            local_q: Vec::with_capacity(n),
            workloads: vec![0.0; n],
        })
    }

    fn run(mut self, rng: &mut ChaCha8Rng) -> Result<BatchOutcome> {
        let p = self.p;
        let n = p.n;
        let tau = p.slot_s;
        let mut next_arrival: Vec<f64> = p
            .lambda
            .iter()
            .map(|&l| if l > 0.0 { rng.sample::<f64, _>(Exp1) / l } else { f64::INFINITY })
            .collect();
        let mut chan: Vec<usize> = p.models.iter().map(|m| m.sample_stationary(rng)).collect();
        let mut inst = vec![0.0; n];
        let mut hol = vec![None; n];
        let mut scratch = Vec::with_capacity(n);
        let mut lb = LowerBoundState::default();
        let mut slot: u64 = 0;
        let horizon = p.batch_slots.saturating_mul(DRAIN_FACTOR);
        loop {
            let t0 = slot as f64 * tau;
            loop {
                let (u, ta) = next_arrival
                    .iter()
                    .enumerate()
                    .fold((0, f64::INFINITY), |b, (i, &t)| if t < b.1 { (i, t) } else { b });
                if ta >= t0 {
                    break;
                }
                self.arrive(u, ta, rng)?;
                next_arrival[u] = ta + rng.sample::<f64, _>(Exp1) / p.lambda[u];
            }
            if slot >= p.batch_slots && self.tagged_pending == 0 {
                break;
            }
            if slot >= horizon {
                return Err(self.unstable(t0));
            }
            if self.in_system == 0 {
                let ta = next_arrival.iter().copied().fold(f64::INFINITY, f64::min);
                let resume = (ta / tau).floor() as u64 + 1;
                if resume > slot + 1 {
                    let skip = resume - slot;
                    self.idle(slot, skip);
                    for (c, m) in chan.iter_mut().zip(&p.models) {
                        *c = p.fading.advance(m, *c, skip, rng);
                    }
                    slot = resume;
                    continue;
                }
            }
            for u in 0..n {
                chan[u] = p.fading.next_state(&p.models[u], chan[u], rng);
                inst[u] = p.models[u].rate(chan[u]);
            }
            let decision = if p.lower_bound {
                for (h, queue) in hol.iter_mut().zip(&self.queues) {
                    *h = queue.front().map(|j| j.file.owner);
                }
                lower_bound_schedule(&inst, &self.q, &hol, &lb)
            } else {
                LowerBoundDecision::Fallthrough
            };
            let (queue, rate) = match decision {
                LowerBoundDecision::Serve { queue, via, .. } => (Some(queue), inst[via]),
                LowerBoundDecision::Fallthrough => {
                    match p.scheduler.choose(&self.q, &inst, &p.mean_rates, rng, &mut scratch) {
                        Some(i) => (Some(i), inst[i]),
                        None => (None, 0.0),
                    }
                }
            };
            let served = queue.filter(|_| rate > 0.0);
            self.observe(slot, served);
            if let Some(i) = served {
                let bits = self.serve(i, rate, t0);
                lb.record(decision, bits);
            }
            slot += 1;
        }
        self.out.slots = slot;
        for queue in &self.queues {
            for job in queue {
                self.out.area += overlap(job.file.request_time, f64::INFINITY, self.w0, self.w1);
                self.out.in_system[job.file.owner] += 1;
            }
        }
        self.out.served_by_group = self.measured.served().to_vec();
        self.out.measured_slots = self.measured.slots();
        Ok(self.out)
    }

    fn unstable(&self, t: f64) -> Error {
        Error::Unstable {
            offered_load: self.p.offered_load,
            backlog: self.in_system,
            time_s: t,
        }
    }

    fn arrive(&mut self, owner: usize, t: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let p = self.p;
        let size = rng.sample::<f64, _>(Exp1) * p.file_bits[owner];
        let carrier = self.dispatch(owner)?;
        let tagged = t >= self.w0 && t < self.w1;
        let mut extra = 0.0;
        if carrier != owner {
            extra = p.costs.eta[owner][carrier];
            if tagged {
                self.out.energy_j += p.costs.phi[owner][carrier];
                self.out.reroutes[owner * p.n + carrier] += 1;
            }
        }
        self.out.generated[owner] += 1;
        if tagged {
            self.tagged_pending += 1;
        }
        self.queues[carrier].push_back(Job {
            file: FileJob {
                owner,
                carrier,
                size_bits: size,
                remaining_bits: size,
                request_time: t,
                completion_time: None,
            },
            extra_delay: extra,
            tagged,
        });
        self.q[carrier] += 1;
        self.work[carrier] += size;
        self.in_system += 1;
        if self.in_system > p.max_backlog {
            return Err(self.unstable(t));
        }
        Ok(())
    }

    fn dispatch(&mut self, owner: usize) -> Result<usize> {
        let p = self.p;
        let g = p.group_of[owner];
        let members = &p.groups[g].members;
        match p.user_rule {
            DispatcherKind::None => Ok(owner),
            DispatcherKind::Jsq => {
                for (i, w) in self.workloads.iter_mut().enumerate() {
                    *w = if p.group_of[i] == g && p.costs.feasible(owner, i) {
                        self.work[i] / p.mean_rates[i]
                    } else {
                        f64::INFINITY
                    };
                }
                Ok(jsq_dispatch(owner, &self.workloads))
            }
            DispatcherKind::Optimal | DispatcherKind::Heuristic | DispatcherKind::LowerBound => {
                self.local_q.clear();
                self.local_q.extend(members.iter().map(|&u| self.q[u]));
                let me = p.local_index[owner];
                let target = match &*self.locals[g] {
                    LocalPolicy::Identity => me,
                    LocalPolicy::Mdp(problem, sol) => {
                        let target = sol.targets_clamped(&self.local_q)[me] as usize;
                        // The MDP only sees file counts; among targets it
                        // rates as equal, prefer the least remaining work.
                        match problem.tied_targets(&sol.relative_values, &self.local_q, me) {
                            Ok(tied) if tied.len() > 1 => tied
                                .into_iter()
                                .filter(|&i| p.costs.feasible(owner, members[i]))
                                .min_by(|&a, &b| {
                                    let wa = self.work[members[a]] / p.mean_rates[members[a]];
                                    let wb = self.work[members[b]] / p.mean_rates[members[b]];
                                    wa.total_cmp(&wb).then((a != me).cmp(&(b != me)))
                                })
                                .unwrap_or(target),
                            _ => target,
                        }
                    }
                    LocalPolicy::Heuristic(h) => h.dispatch(me, &self.local_q)?,
                };
                Ok(members[target])
            }
        }
    }

    fn serve(&mut self, i: usize, rate: f64, t0: f64) -> f64 {
        let cap = rate * self.p.slot_s;
        let job = self.queues[i].front_mut().expect("served queue is non-empty");
        if job.file.remaining_bits > cap {
            job.file.remaining_bits -= cap;
            self.work[i] -= cap;
            return cap;
        }
        let bits = job.file.remaining_bits;
        let done = t0 + bits / rate;
        let mut job = self.queues[i].pop_front().expect("non-empty");
        job.file.remaining_bits = 0.0;
        job.file.completion_time = Some(done);
        self.q[i] -= 1;
        self.work[i] = if self.q[i] == 0 { 0.0 } else { (self.work[i] - bits).max(0.0) };
        self.in_system -= 1;
        self.out.completed[job.file.owner] += 1;
        self.out.area += overlap(job.file.request_time, done, self.w0, self.w1);
        if job.tagged {
            self.out.delay_sum += done - job.file.request_time + job.extra_delay;
            self.out.delay_count += 1;
            self.tagged_pending -= 1;
        }
        bits
    }

    fn in_measurement(&self, slot: u64) -> bool {
        slot >= self.p.warmup_slots && slot < self.p.batch_slots
    }

    fn observe(&mut self, slot: u64, served: Option<usize>) {
        if self.in_measurement(slot) {
            self.measured.observe(&self.q, served);
        }
        if self.p.adaptive {
            self.window.observe(&self.q, served);
            if self.window.slots() >= self.p.window_slots {
                self.reestimate();
            }
        }
    }

    /// `k` empty slots starting at `slot`.
    fn idle(&mut self, slot: u64, k: u64) {
        let lo = slot.max(self.p.warmup_slots);
        let hi = (slot + k).min(self.p.batch_slots);
        if hi > lo {
            self.measured.observe_idle(hi - lo);
        }
        if self.p.adaptive {
            let mut left = k;
            while left > 0 {
                let room = self.p.window_slots - self.window.slots();
                let step = room.min(left);
                self.window.observe_idle(step);
                left -= step;
                if self.window.slots() >= self.p.window_slots {
                    self.reestimate();
                }
            }
        }
    }

    fn reestimate(&mut self) {
        let fresh = self.window.alpha().expect("full window");
        self.window.reset();
        for (g, a) in fresh.into_iter().enumerate() {
            if (a - self.alpha[g]).abs() > self.p.resolve_threshold {
                // A failed re-solve keeps the previous policy.
                if let Ok(pol) = self.p.local_policy(g, a) {
                    self.alpha[g] = a;
                    self.locals[g] = pol;
                }
            }
        }
    }
}

fn overlap(start: f64, end: f64, w0: f64, w1: f64) -> f64 {
    (end.min(w1) - start.max(w0)).max(0.0)
}

/// Aggregates batch outcomes into a report.
pub(super) fn summarize(p: &Prepared, batches: &[BatchOutcome], confidence: f64) -> SimReport {
    let n = p.n;
    let total_lambda: f64 = p.lambda.iter().sum();
    let delays: Vec<f64> = batches
        .iter()
        .map(|b| if b.delay_count > 0 { b.delay_sum / b.delay_count as f64 } else { 0.0 })
        .collect();
    let powers: Vec<f64> = batches.iter().map(|b| b.energy_j / b.window_s).collect();
    let littles: Vec<f64> = batches.iter().map(|b| b.area / b.window_s / total_lambda).collect();
    let delay = t_interval(&delays, confidence);
    let power = t_interval(&powers, confidence);
    let little = t_interval(&littles, confidence);
    let measured_time: f64 = batches.iter().map(|b| b.window_s).sum();
    let energy: f64 = batches.iter().map(|b| b.energy_j).sum();
    let sum_u64 = |f: &dyn Fn(&BatchOutcome) -> &Vec<u64>, len: usize| -> Vec<u64> {
        (0..len).map(|k| batches.iter().map(|b| f(b)[k]).sum()).collect()
    };
    let reroutes = sum_u64(&|b| &b.reroutes, n * n);
    let served = sum_u64(&|b| &b.served_by_group, p.groups.len());
    let measured_slots: u64 = batches.iter().map(|b| b.measured_slots).sum();
    let area: f64 = batches.iter().map(|b| b.area).sum();
    SimReport {
        dispatcher: if p.lower_bound { DispatcherKind::LowerBound } else { p.user_rule },
        mean_delay_s: delay.mean,
        delay_half_width_s: delay.half_width,
        rerouting_power_w: power.mean,
        power_half_width_w: power.half_width,
        reroute_rates: (0..n)
            .map(|j| (0..n).map(|i| reroutes[j * n + i] as f64 / measured_time).collect())
            .collect(),
        mean_total_queue: area / measured_time,
        littles_law_delay_s: little.mean,
        littles_half_width_s: little.half_width,
        confidence,
        target_met: false,
        batches: batches.len(),
        slots_simulated: batches.iter().map(|b| b.slots).sum(),
        measured_time_s: measured_time,
        rerouting_energy_j: energy,
        files_measured: batches.iter().map(|b| b.delay_count).sum(),
        files_generated: sum_u64(&|b| &b.generated, n),
        files_completed: sum_u64(&|b| &b.completed, n),
        files_in_system: sum_u64(&|b| &b.in_system, n),
        offered_load: p.offered_load,
        alpha: served
            .iter()
            .map(|&s| if measured_slots > 0 { s as f64 / measured_slots as f64 } else { 0.0 })
            .collect(),
        clusters: p.clusters.clone(),
    }
}
