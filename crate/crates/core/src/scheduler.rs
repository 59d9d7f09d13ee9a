//! Base-station scheduling policies and the average service rates they induce.
//!
//! A scheduler is described by its selection probabilities `ξ_i(q, c)`: given
//! queue lengths `q` and per-user channel states `c`, the probability that
//! user `i` is served in the slot. Averaging `ξ_i R_i` over the product channel
//! law gives the queue-state-dependent service rate `μ_i(q)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelModel;
use crate::error::{invalid, Error, Result};
use crate::parallel::{map_indexed, Execution};

/// Largest channel-vector count enumerated exactly (`K^N`).
pub const MAX_ENUMERATION: u128 = 1 << 20;

const MONTE_CARLO_SAMPLES: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerKind {
    /// Serve the non-empty queue with the best instantaneous rate.
    Greedy,
    /// Weight the normalized instantaneous rate by `log(b + a_j q_j)`.
    LogRule,
    /// Longest connected queue: the largest workload among non-empty queues
    /// whose instantaneous rate is positive.
    Lcq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerPolicy {
    pub kind: SchedulerKind,
    pub log_rule_b: f64,
    /// Per-user `a_j`; empty means 1 for everyone.
    pub log_rule_a: Vec<f64>,
    /// Pick the minimizer of the log-rule metric instead of the maximizer.
    pub log_rule_argmin: bool,
    /// Mean file size per user in bits, scaling LCQ workloads; empty means 1.
    pub file_bits: Vec<f64>,
}

impl Default for SchedulerPolicy {
    fn default() -> Self {
        Self::greedy()
    }
}

impl SchedulerPolicy {
    pub fn new(kind: SchedulerKind) -> Self {
        SchedulerPolicy {
            kind,
            log_rule_b: 1.0,
            log_rule_a: Vec::new(),
            log_rule_argmin: false,
            file_bits: Vec::new(),
        }
    }

    pub fn greedy() -> Self {
        Self::new(SchedulerKind::Greedy)
    }

    pub fn log_rule() -> Self {
        Self::new(SchedulerKind::LogRule)
    }

    pub fn lcq() -> Self {
        Self::new(SchedulerKind::Lcq)
    }

    /// Queue-aware schedulers depend on queue lengths, not only on which
    /// queues are non-empty.
    pub fn is_queue_aware(&self) -> bool {
        !matches!(self.kind, SchedulerKind::Greedy)
    }

    pub fn validate(&self, num_users: usize) -> Result<()> {
        if !(self.log_rule_b > 0.0) {
            return Err(invalid(format!("log_rule_b must be positive, got {}", self.log_rule_b)));
        }
        for (name, v) in [("log_rule_a", &self.log_rule_a), ("file_bits", &self.file_bits)] {
            if !v.is_empty() && v.len() != num_users {
                return Err(invalid(format!("{name} has {} entries for {num_users} users", v.len())));
            }
            if v.iter().any(|x| !(*x > 0.0)) {
                return Err(invalid(format!("{name} entries must be positive")));
            }
        }
        Ok(())
    }

    #[inline]
    fn a(&self, j: usize) -> f64 {
        self.log_rule_a.get(j).copied().unwrap_or(1.0)
    }

    #[inline]
    fn bits(&self, j: usize) -> f64 {
        self.file_bits.get(j).copied().unwrap_or(1.0)
    }

    /// Users tied for selection given instantaneous and mean rates. Empty when
    /// nobody can be served.
    pub(crate) fn candidates(&self, q: &[u32], inst: &[f64], mean: &[f64], out: &mut Vec<usize>) {
        out.clear();
        let mut best = f64::NEG_INFINITY;
        let mut consider = |j: usize, metric: f64, out: &mut Vec<usize>| {
            if metric > best {
                best = metric;
                out.clear();
                out.push(j);
            } else if metric == best {
                out.push(j);
            }
        };
        match self.kind {
            SchedulerKind::Greedy => {
                for j in 0..q.len() {
                    if q[j] > 0 {
                        consider(j, inst[j], out);
                    }
                }
            }
            SchedulerKind::LogRule => {
                let sign = if self.log_rule_argmin { -1.0 } else { 1.0 };
                for j in 0..q.len() {
                    if q[j] > 0 {
                        let norm = if mean[j] > 0.0 { inst[j] / mean[j] } else { 0.0 };
                        let metric = norm * (self.log_rule_b + self.a(j) * q[j] as f64).ln();
                        consider(j, sign * metric, out);
                    }
                }
            }
            SchedulerKind::Lcq => {
                for j in 0..q.len() {
                    if q[j] > 0 && inst[j] > 0.0 {
                        consider(j, q[j] as f64 * self.bits(j) / mean[j], out);
                    }
                }
            }
        }
    }

    /// Samples the served user, breaking ties uniformly.
    #[inline]
    pub fn choose<R: Rng + ?Sized>(
        &self,
        q: &[u32],
        inst: &[f64],
        mean: &[f64],
        rng: &mut R,
        scratch: &mut Vec<usize>,
    ) -> Option<usize> {
        self.candidates(q, inst, mean, scratch);
        match scratch.len() {
            0 => None,
            1 => Some(scratch[0]),
            n => Some(scratch[rng.random_range(0..n)]),
        }
    }
}

fn check_lengths(q: &[u32], models: &[ChannelModel]) -> Result<()> {
    if q.len() != models.len() {
        return Err(invalid(format!(
            "queue vector has {} users but {} channel models were given",
            q.len(),
            models.len()
        )));
    }
    Ok(())
}

fn mean_rates(models: &[ChannelModel]) -> Vec<f64> {
    models.iter().map(ChannelModel::mean_rate).collect()
}

/// Selection probabilities `ξ(q, c)`.
pub fn select(policy: &SchedulerPolicy, q: &[u32], c: &[usize], models: &[ChannelModel]) -> Result<Vec<f64>> {
    check_lengths(q, models)?;
    if c.len() != q.len() {
        return Err(invalid(format!("channel vector has {} entries for {} users", c.len(), q.len())));
    }
    policy.validate(q.len())?;
    let mut inst = Vec::with_capacity(q.len());
    for (j, m) in models.iter().enumerate() {
        if c[j] >= m.num_states() {
            return Err(invalid(format!("channel state {} out of range for user {j}", c[j])));
        }
        inst.push(m.rate(c[j]));
    }
    let mut set = Vec::new();
    policy.candidates(q, &inst, &mean_rates(models), &mut set);
    let mut xi = vec![0.0; q.len()];
    let share = 1.0 / set.len().max(1) as f64;
    for &j in &set {
        xi[j] = share;
    }
    Ok(xi)
}

fn enumeration_size(models: &[ChannelModel]) -> u128 {
    models
        .iter()
        .map(|m| m.num_states() as u128)
        .fold(1u128, |acc, k| acc.saturating_mul(k))
}

/// Exact `μ_i(q) = Σ_c (Π_j p_j^{c_j}) ξ_i(q, c) R_i^{c_i}` in bits/s.
pub fn average_rates(policy: &SchedulerPolicy, q: &[u32], models: &[ChannelModel]) -> Result<Vec<f64>> {
    check_lengths(q, models)?;
    policy.validate(q.len())?;
    let total = enumeration_size(models);
    if total > MAX_ENUMERATION {
        return Err(Error::ResourceLimit {
            size: total,
            cap: MAX_ENUMERATION as usize,
        });
    }
    Ok(enumerate_rates(policy, q, models, &mean_rates(models)))
}

fn enumerate_rates(policy: &SchedulerPolicy, q: &[u32], models: &[ChannelModel], mean: &[f64]) -> Vec<f64> {
    let n = q.len();
    let mut mu = vec![0.0; n];
    if q.iter().all(|&x| x == 0) {
        return mu;
    }
    let mut c = vec![0usize; n];
    let mut inst: Vec<f64> = models.iter().map(|m| m.rate(0)).collect();
    let mut set = Vec::with_capacity(n);
    loop {
        let p: f64 = (0..n).map(|j| models[j].probability(c[j])).product();
        if p > 0.0 {
            policy.candidates(q, &inst, mean, &mut set);
            if !set.is_empty() {
                let w = p / set.len() as f64;
                for &j in &set {
                    mu[j] += w * inst[j];
                }
            }
        }
        // Mixed-radix increment over channel vectors.
        let mut j = 0;
        loop {
            if j == n {
                return mu;
            }
            c[j] += 1;
            if c[j] < models[j].num_states() {
                inst[j] = models[j].rate(c[j]);
                break;
            }
            c[j] = 0;
            inst[j] = models[j].rate(0);
            j += 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateEstimate {
    pub mean: Vec<f64>,
    /// Standard error per user; zero when computed exactly.
    pub std_error: Vec<f64>,
    pub exact: bool,
}

/// Monte-Carlo estimate of `μ(q)`, averaging `ξ_i R_i` over sampled channel
/// vectors (ties contribute fractionally, so the only noise is the channel).
pub fn average_rates_monte_carlo<R: Rng + ?Sized>(
    policy: &SchedulerPolicy,
    q: &[u32],
    models: &[ChannelModel],
    samples: usize,
    rng: &mut R,
) -> Result<RateEstimate> {
    check_lengths(q, models)?;
    policy.validate(q.len())?;
    if samples < 2 {
        return Err(invalid("Monte-Carlo rate estimation needs at least 2 samples"));
    }
    let n = q.len();
    let mean = mean_rates(models);
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    let mut inst = vec![0.0; n];
    let mut set = Vec::with_capacity(n);
    for _ in 0..samples {
        for (j, m) in models.iter().enumerate() {
            inst[j] = m.rate(m.sample_stationary(rng));
        }
        policy.candidates(q, &inst, &mean, &mut set);
        let share = 1.0 / set.len().max(1) as f64;
        for j in 0..n {
            let x = if set.contains(&j) { share * inst[j] } else { 0.0 };
            sum[j] += x;
            sum_sq[j] += x * x;
        }
    }
    let s = samples as f64;
    let mean_out: Vec<f64> = sum.iter().map(|x| x / s).collect();
    let std_error = (0..n)
        .map(|j| {
            let var = (sum_sq[j] / s - mean_out[j] * mean_out[j]).max(0.0) * s / (s - 1.0);
            (var / s).sqrt()
        })
        .collect();
    Ok(RateEstimate {
        mean: mean_out,
        std_error,
        exact: false,
    })
}

/// Exact rates when `K^N` is enumerable, Monte-Carlo otherwise.
pub fn estimate_rates<R: Rng + ?Sized>(
    policy: &SchedulerPolicy,
    q: &[u32],
    models: &[ChannelModel],
    rng: &mut R,
) -> Result<RateEstimate> {
    if enumeration_size(models) <= MAX_ENUMERATION {
        let mean = average_rates(policy, q, models)?;
        let n = mean.len();
        Ok(RateEstimate {
            mean,
            std_error: vec![0.0; n],
            exact: true,
        })
    } else {
        average_rates_monte_carlo(policy, q, models, MONTE_CARLO_SAMPLES, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RateIndex {
    /// One entry per non-empty mask (`2^N` entries).
    Mask,
    /// One entry per queue vector in `[0, truncation]^N`; larger queues are
    /// clamped onto the box.
    Grid { truncation: u32 },
}

#[derive(Clone, Debug)]
pub struct TableOptions {
    pub truncation: u32,
    pub max_entries: usize,
    pub execution: Execution,
}

impl Default for TableOptions {
    fn default() -> Self {
        TableOptions {
            truncation: 40,
            max_entries: 1 << 22,
            execution: Execution::default(),
        }
    }
}

/// Precomputed `μ(q)` for every queue state the MDP can visit.
///
/// Units are whatever the entries were built in: bits/s from
/// [`ServiceRateTable::build`], files/s after [`ServiceRateTable::per_file`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceRateTable {
    num_users: usize,
    index: RateIndex,
    values: Vec<f64>,
}

impl ServiceRateTable {
    pub fn build(policy: &SchedulerPolicy, models: &[ChannelModel], opts: &TableOptions) -> Result<Self> {
        let n = models.len();
        if n == 0 {
            return Err(invalid("at least one user is required"));
        }
        if opts.truncation < 1 {
            return Err(invalid("truncation must be at least 1"));
        }
        policy.validate(n)?;
        let index = if policy.is_queue_aware() {
            RateIndex::Grid {
                truncation: opts.truncation,
            }
        } else {
            RateIndex::Mask
        };
        let entries = entry_count(n, &index);
        if entries > opts.max_entries as u128 {
            return Err(Error::ResourceLimit {
                size: entries,
                cap: opts.max_entries,
            });
        }
        let entries = entries as usize;
        let mean = mean_rates(models);
        let exact = enumeration_size(models) <= MAX_ENUMERATION;
        let rows = map_indexed(opts.execution, entries, |e| {
            let q = representative(n, &index, e);
            if exact {
                enumerate_rates(policy, &q, models, &mean)
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(e as u64);
                average_rates_monte_carlo(policy, &q, models, MONTE_CARLO_SAMPLES, &mut rng)
                    .expect("validated inputs")
                    .mean
            }
        });
        Ok(ServiceRateTable {
            num_users: n,
            index,
            values: rows.into_iter().flatten().collect(),
        })
    }

    /// Mask-indexed table from explicit rows; row `m` holds `μ` for the
    /// non-empty set encoded by bit mask `m`.
    pub fn from_mask_entries(num_users: usize, rows: &[Vec<f64>]) -> Result<Self> {
        if num_users == 0 || num_users > 24 {
            return Err(invalid(format!("unsupported user count {num_users}")));
        }
        if rows.len() != 1 << num_users {
            return Err(invalid(format!(
                "{} rows given, expected {}",
                rows.len(),
                1usize << num_users
            )));
        }
        let mut values = Vec::with_capacity(rows.len() * num_users);
        for (m, row) in rows.iter().enumerate() {
            if row.len() != num_users {
                return Err(invalid(format!("row {m} has {} entries", row.len())));
            }
            for (i, &v) in row.iter().enumerate() {
                if m & (1 << i) == 0 && v != 0.0 {
                    return Err(invalid(format!("row {m} gives empty user {i} a non-zero rate")));
                }
            }
            values.extend_from_slice(row);
        }
        Ok(ServiceRateTable {
            num_users,
            index: RateIndex::Mask,
            values,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn index(&self) -> &RateIndex {
        &self.index
    }

    pub fn is_queue_aware(&self) -> bool {
        matches!(self.index, RateIndex::Grid { .. })
    }

    pub fn num_entries(&self) -> usize {
        self.values.len() / self.num_users
    }

    fn entry_of(&self, q: &[u32]) -> usize {
        match self.index {
            RateIndex::Mask => q
                .iter()
                .enumerate()
                .fold(0, |m, (i, &x)| if x > 0 { m | (1 << i) } else { m }),
            RateIndex::Grid { truncation } => {
                let base = truncation as usize + 1;
                q.iter()
                    .rev()
                    .fold(0, |acc, &x| acc * base + x.min(truncation) as usize)
            }
        }
    }

    #[inline]
    pub fn rates(&self, q: &[u32]) -> &[f64] {
        debug_assert_eq!(q.len(), self.num_users);
        let e = self.entry_of(q);
        &self.values[e * self.num_users..(e + 1) * self.num_users]
    }

    /// Representative queue vector and rates of every entry.
    pub fn entries(&self) -> impl Iterator<Item = (Vec<u32>, &[f64])> + '_ {
        let n = self.num_users;
        self.values
            .chunks(n)
            .enumerate()
            .map(move |(e, row)| (representative(n, &self.index, e), row))
    }

    /// Converts bits/s to files/s by dividing user `i`'s column by its mean
    /// file size.
    pub fn per_file(&self, file_bits: &[f64]) -> Result<Self> {
        if file_bits.len() != self.num_users || file_bits.iter().any(|b| !(*b > 0.0)) {
            return Err(invalid("file sizes must be positive, one per user"));
        }
        let mut out = self.clone();
        for row in out.values.chunks_mut(self.num_users) {
            for (v, b) in row.iter_mut().zip(file_bits) {
                *v /= b;
            }
        }
        Ok(out)
    }

    /// Every rate multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// `max_q |μ(q)|`.
    pub fn max_total_rate(&self) -> f64 {
        self.values
            .chunks(self.num_users)
            .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Overwrites one rate. Intended for fault-injection tests of the
    /// verification checks.
    pub fn set_rate(&mut self, q: &[u32], user: usize, value: f64) {
        let e = self.entry_of(q);
        self.values[e * self.num_users + user] = value;
    }
}

fn entry_count(n: usize, index: &RateIndex) -> u128 {
    match index {
        RateIndex::Mask => 1u128 << n,
        RateIndex::Grid { truncation } => (*truncation as u128 + 1).saturating_pow(n as u32),
    }
}

fn representative(n: usize, index: &RateIndex, e: usize) -> Vec<u32> {
    match index {
        RateIndex::Mask => (0..n).map(|i| ((e >> i) & 1) as u32).collect(),
        RateIndex::Grid { truncation } => {
            let base = *truncation as usize + 1;
            let mut rest = e;
            (0..n)
                .map(|_| {
                    let x = rest % base;
                    rest /= base;
                    x as u32
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{discretize, ChannelConfig};

    fn on_off(p: f64, rate: f64) -> ChannelModel {
        // B = rate makes the on state's SNR 2 carry exactly `rate` bits/s.
        ChannelModel::on_off(rate, p, 2.0).unwrap()
    }

    #[test]
    fn greedy_single_nonempty_queue() {
        let models = vec![on_off(0.5, 1.0), on_off(0.5, 1.0)];
        for c in [[0, 0], [0, 1], [1, 0], [1, 1]] {
            assert_eq!(select(&SchedulerPolicy::greedy(), &[3, 0], &c, &models).unwrap(), vec![1.0, 0.0]);
        }
    }

    #[test]
    fn greedy_ties_split_uniformly() {
        let models = vec![on_off(0.5, 1.0), on_off(0.5, 1.0)];
        let xi = select(&SchedulerPolicy::greedy(), &[1, 1], &[1, 1], &models).unwrap();
        assert_eq!(xi, vec![0.5, 0.5]);
    }

    #[test]
    fn all_empty_selects_nobody() {
        let models = vec![on_off(0.5, 1.0), on_off(0.5, 1.0)];
        for policy in [SchedulerPolicy::greedy(), SchedulerPolicy::log_rule(), SchedulerPolicy::lcq()] {
            assert_eq!(select(&policy, &[0, 0], &[1, 1], &models).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn lcq_equal_queues_both_on() {
        let models = vec![on_off(0.5, 1.0), on_off(0.5, 1.0)];
        let xi = select(&SchedulerPolicy::lcq(), &[2, 2], &[1, 1], &models).unwrap();
        assert_eq!(xi, vec![0.5, 0.5]);
        // Nobody connected.
        assert_eq!(select(&SchedulerPolicy::lcq(), &[2, 2], &[0, 0], &models).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn log_rule_prefers_longer_queue_at_equal_rates() {
        let models = vec![on_off(0.5, 1.0), on_off(0.5, 1.0)];
        let xi = select(&SchedulerPolicy::log_rule(), &[1, 5], &[1, 1], &models).unwrap();
        assert_eq!(xi, vec![0.0, 1.0]);
        let mut argmin = SchedulerPolicy::log_rule();
        argmin.log_rule_argmin = true;
        assert_eq!(select(&argmin, &[1, 5], &[1, 1], &models).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn select_rejects_mismatched_lengths() {
        let models = vec![on_off(0.5, 1.0), on_off(0.5, 1.0)];
        assert!(select(&SchedulerPolicy::greedy(), &[1], &[0, 0], &models).is_err());
        assert!(select(&SchedulerPolicy::greedy(), &[1, 1], &[0], &models).is_err());
    }

    #[test]
    fn greedy_on_off_two_users_by_hand() {
        // Channel vectors: (on,on) p², (on,off) p(1-p), (off,on), (off,off).
        let (p, r) = (0.3, 2.0);
        let models = vec![on_off(p, r), on_off(p, r)];
        let mu = average_rates(&SchedulerPolicy::greedy(), &[1, 1], &models).unwrap();
        let expected = r * (p * (1.0 - p) + p * p / 2.0);
        assert!((mu[0] - expected).abs() < 1e-12 && (mu[1] - expected).abs() < 1e-12);
        let solo = average_rates(&SchedulerPolicy::greedy(), &[1, 0], &models).unwrap();
        assert!((solo[0] - p * r).abs() < 1e-12);
        assert_eq!(solo[1], 0.0);
        assert_eq!(average_rates(&SchedulerPolicy::greedy(), &[0, 0], &models).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn lcq_on_off_rates_by_ordering() {
        let (p1, p2) = (0.6, 0.4);
        let models = vec![on_off(p1, 1.0), on_off(p2, 1.0)];
        let lcq = SchedulerPolicy::lcq();
        // Equal counts, unequal connectivity: the less-connected user carries
        // more work and wins.
        let eq = average_rates(&lcq, &[3, 3], &models).unwrap();
        assert_eq!(eq, average_rates(&lcq, &[2, 5], &models).unwrap());
        let longer_first = average_rates(&lcq, &[5, 2], &models).unwrap();
        assert!((longer_first[0] - p1).abs() < 1e-12);
        assert!((longer_first[1] - p2 * (1.0 - p1)).abs() < 1e-12);
        let longer_second = average_rates(&lcq, &[2, 5], &models).unwrap();
        assert!((longer_second[0] - p1 * (1.0 - p2)).abs() < 1e-12);
        assert!((longer_second[1] - p2).abs() < 1e-12);
    }

    #[test]
    fn lcq_homogeneous_equal_queues_match_half_busy_probability() {
        let p = 0.45;
        let models = vec![on_off(p, 1.0), on_off(p, 1.0)];
        let mu = average_rates(&SchedulerPolicy::lcq(), &[4, 4], &models).unwrap();
        for m in mu {
            assert!((m - (2.0 * p - p * p) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_table_has_four_entries_for_two_users() {
        let cfg = ChannelConfig::table_one();
        let models: Vec<_> = [100.0, 92.0].iter().map(|&d| discretize(&cfg, d).unwrap()).collect();
        let t = ServiceRateTable::build(&SchedulerPolicy::greedy(), &models, &TableOptions::default()).unwrap();
        assert_eq!(t.num_entries(), 4);
        assert_eq!(t.rates(&[0, 0]), &[0.0, 0.0]);
        assert_eq!(t.rates(&[7, 0])[1], 0.0);
    }

    #[test]
    fn log_rule_grid_size() {
        let cfg = ChannelConfig::table_one();
        let models: Vec<_> = [100.0, 100.0].iter().map(|&d| discretize(&cfg, d).unwrap()).collect();
        let opts = TableOptions {
            truncation: 30,
            ..TableOptions::default()
        };
        let t = ServiceRateTable::build(&SchedulerPolicy::log_rule(), &models, &opts).unwrap();
        assert_eq!(t.num_entries(), 31 * 31);
    }

    #[test]
    fn table_state_cap_is_enforced() {
        let cfg = ChannelConfig::table_one();
        let models: Vec<_> = (0..3).map(|_| discretize(&cfg, 100.0).unwrap()).collect();
        let opts = TableOptions {
            truncation: 40,
            max_entries: 1000,
            ..TableOptions::default()
        };
        assert!(matches!(
            ServiceRateTable::build(&SchedulerPolicy::log_rule(), &models, &opts),
            Err(Error::ResourceLimit { .. })
        ));
    }

    #[test]
    fn table_agrees_with_direct_evaluation() {
        use rand::{Rng, SeedableRng};
        let cfg = ChannelConfig {
            num_states: 4,
            ..ChannelConfig::table_one()
        };
        let models: Vec<_> = [100.0, 92.0, 86.0].iter().map(|&d| discretize(&cfg, d).unwrap()).collect();
        let opts = TableOptions {
            truncation: 6,
            ..TableOptions::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for policy in [SchedulerPolicy::greedy(), SchedulerPolicy::log_rule(), SchedulerPolicy::lcq()] {
            let t = ServiceRateTable::build(&policy, &models, &opts).unwrap();
            for _ in 0..100 {
                let q: Vec<u32> = (0..3).map(|_| rng.random_range(0..=6)).collect();
                let direct = average_rates(&policy, &q, &models).unwrap();
                assert_eq!(t.rates(&q), direct.as_slice(), "{policy:?} at {q:?}");
            }
        }
    }

    #[test]
    fn monte_carlo_tracks_exact_rates() {
        let cfg = ChannelConfig::table_one();
        let models: Vec<_> = [100.0, 80.0].iter().map(|&d| discretize(&cfg, d).unwrap()).collect();
        let exact = average_rates(&SchedulerPolicy::greedy(), &[1, 1], &models).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let est =
            average_rates_monte_carlo(&SchedulerPolicy::greedy(), &[1, 1], &models, 200_000, &mut rng).unwrap();
        for i in 0..2 {
            assert!((est.mean[i] - exact[i]).abs() < 4.0 * est.std_error[i], "user {i}");
        }
    }

    #[test]
    fn greedy_more_competitors_never_raise_own_rate() {
        let cfg = ChannelConfig::table_one();
        let models: Vec<_> = [100.0, 92.0, 70.0].iter().map(|&d| discretize(&cfg, d).unwrap()).collect();
        let t = ServiceRateTable::build(&SchedulerPolicy::greedy(), &models, &TableOptions::default()).unwrap();
        for (q, row) in t.entries() {
            for i in 0..3 {
                if q[i] == 0 {
                    assert_eq!(row[i], 0.0);
                    continue;
                }
                let mut solo = vec![0; 3];
                solo[i] = 1;
                assert!(t.rates(&solo)[i] >= row[i]);
            }
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::channel::{discretize, ChannelConfig};
    use proptest::prelude::*;

    fn models(distances: &[f64], k: usize) -> Vec<ChannelModel> {
        let cfg = ChannelConfig {
            num_states: k,
            ..ChannelConfig::table_one()
        };
        distances.iter().map(|&d| discretize(&cfg, d).unwrap()).collect()
    }

    proptest! {
        #[test]
        fn selection_rows_are_distributions(
            d in prop::collection::vec(20.0f64..150.0, 3),
            q in prop::collection::vec(0u32..5, 3),
            c in prop::collection::vec(0usize..4, 3),
            kind in prop_oneof![Just(SchedulerKind::Greedy), Just(SchedulerKind::LogRule)],
        ) {
            let ms = models(&d, 4);
            let xi = select(&SchedulerPolicy::new(kind), &q, &c, &ms).unwrap();
            let total: f64 = xi.iter().sum();
            if q.iter().any(|&x| x > 0) {
                prop_assert!((total - 1.0).abs() < 1e-12);
            } else {
                prop_assert_eq!(total, 0.0);
            }
            for i in 0..3 {
                if q[i] == 0 { prop_assert_eq!(xi[i], 0.0); }
            }
        }

        #[test]
        fn rates_scale_linearly(
            d in prop::collection::vec(20.0f64..150.0, 2),
            q in prop::collection::vec(0u32..4, 2),
            alpha in 0.1f64..10.0,
        ) {
            let ms = models(&d, 4);
            let scaled_cfg = ChannelConfig { bandwidth_hz: 1.4e6 * alpha, num_states: 4, ..ChannelConfig::table_one() };
            let scaled: Vec<_> = d.iter().map(|&x| discretize(&scaled_cfg, x).unwrap()).collect();
            for policy in [SchedulerPolicy::greedy(), SchedulerPolicy::log_rule(), SchedulerPolicy::lcq()] {
                let base = average_rates(&policy, &q, &ms).unwrap();
                let up = average_rates(&policy, &q, &scaled).unwrap();
                for i in 0..2 {
                    prop_assert!((up[i] - alpha * base[i]).abs() <= 1e-9 * (1.0 + up[i].abs()));
                }
            }
        }

        #[test]
        fn greedy_sum_rate_beats_any_solo_rate_for_homogeneous_users(
            d in 20.0f64..150.0,
            n in 2usize..5,
        ) {
            let ms = models(&vec![d; n], 8);
            let all = average_rates(&SchedulerPolicy::greedy(), &vec![1; n], &ms).unwrap();
            let total: f64 = all.iter().sum();
            for j in 0..n {
                let mut q = vec![0; n];
                q[j] = 1;
                let solo = average_rates(&SchedulerPolicy::greedy(), &q, &ms).unwrap();
                prop_assert!(total >= solo[j] - 1e-9);
            }
        }
    }
}
