//! N-user dispatching from two-user solves.
//!
//! All users other than the least-loaded one `j` are merged into a combined
//! user; a sequence of two-user problems (combined vs. `j`) decides, in order
//! of decreasing workload, whether each user's arrivals should go to `j`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use crate::error::{invalid, Error, Result};
use crate::mdp::{solve, CostModel, MdpProblem, MdpSolution, SolveOptions, TwoUserAction};
use crate::parallel::Execution;
use crate::scheduler::ServiceRateTable;

/// Log-grid step used to quantize rates in cache keys.
pub const RATE_QUANTUM: f64 = 1e-4;

/// `argmin_l q_l θ_l / r_l` (seconds of work at the solo bit rate), ties to the
/// lowest index.
pub fn least_workload_user(q: &[u32], solo_rates_bps: &[f64], file_bits: &[f64]) -> usize {
    let mut best = 0;
    let mut best_w = f64::INFINITY;
    for l in 0..q.len() {
        let w = q[l] as f64 * file_bits[l] / solo_rates_bps[l];
        if w < best_w {
            best_w = w;
            best = l;
        }
    }
    best
}

/// `argmax` workload over `candidates`, ties to the lowest index.
fn most_loaded(q: &[u32], solo: &[f64], candidates: &[usize]) -> usize {
    let mut best = candidates[0];
    let mut best_w = f64::NEG_INFINITY;
    for &l in candidates {
        let w = q[l] as f64 / solo[l];
        if w > best_w {
            best_w = w;
            best = l;
        }
    }
    best
}

/// Two-user problem: user 1 is the combined user, user 2 the least-loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedProblem {
    pub lambda: [f64; 2],
    /// `μ̃` in files/s for the masks `{1}`, `{2}`, `{1,2}`: combined alone,
    /// least-loaded alone, and both.
    pub mu_first_only: f64,
    pub mu_second_only: f64,
    pub mu_both: [f64; 2],
    pub eta: [f64; 2],
    pub phi: [f64; 2],
    pub weight: [f64; 2],
    pub q: [u32; 2],
}

impl ReducedProblem {
    fn rates(&self) -> [f64; 6] {
        [
            self.lambda[0],
            self.lambda[1],
            self.mu_first_only,
            self.mu_second_only,
            self.mu_both[0],
            self.mu_both[1],
        ]
    }

    /// Problem built from the quantized parameters, so that the solution is a
    /// function of the cache key alone.
    pub fn to_mdp(&self, truncation: u32) -> Result<MdpProblem> {
        let key = cache_key(self);
        let r: Vec<f64> = key.rates.iter().map(|&k| dequantize(k)).collect();
        let table = ServiceRateTable::from_mask_entries(
            2,
            &[vec![0.0, 0.0], vec![r[2], 0.0], vec![0.0, r[3]], vec![r[4], r[5]]],
        )?;
        let costs = CostModel::new(
            vec![vec![0.0, self.eta[0]], vec![self.eta[1], 0.0]],
            vec![vec![0.0, self.phi[0]], vec![self.phi[1], 0.0]],
            vec![vec![0.0, self.weight[0]], vec![self.weight[1], 0.0]],
        )?;
        MdpProblem::new(vec![r[0], r[1]], table, costs, truncation)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CacheKey {
    /// `round(ln x / RATE_QUANTUM)`, or `i64::MIN` for zero.
    pub rates: [i64; 6],
    /// Exact bit patterns of `η̃`, `φ̃`, `w̃`.
    pub costs: [u64; 6],
}

fn quantize(x: f64) -> i64 {
    if x <= 0.0 {
        i64::MIN
    } else {
        (x.ln() / RATE_QUANTUM).round() as i64
    }
}

fn dequantize(k: i64) -> f64 {
    if k == i64::MIN {
        0.0
    } else {
        (k as f64 * RATE_QUANTUM).exp()
    }
}

/// Rates on a relative 1e-4 log grid, costs bit-exact. User roles are not
/// canonicalized: swapping them gives a different key.
pub fn cache_key(p: &ReducedProblem) -> CacheKey {
    let r = p.rates();
    let mut rates = [0i64; 6];
    for (k, x) in rates.iter_mut().zip(r) {
        *k = quantize(x);
    }
    let c = [p.eta[0], p.eta[1], p.phi[0], p.phi[1], p.weight[0], p.weight[1]];
    let mut costs = [0u64; 6];
    for (k, x) in costs.iter_mut().zip(c) {
        *k = x.to_bits();
    }
    CacheKey { rates, costs }
}

/// Two-user solutions keyed by quantized parameters.
#[derive(Debug)]
pub struct DpCache {
    truncation: u32,
    options: SolveOptions,
    map: RwLock<HashMap<CacheKey, Arc<MdpSolution>>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl DpCache {
    pub fn new(truncation: u32) -> Self {
        Self::with_options(
            truncation,
            SolveOptions {
                execution: Execution::Sequential,
                ..SolveOptions::default()
            },
        )
    }

    pub fn with_options(truncation: u32, options: SolveOptions) -> Self {
        DpCache {
            truncation,
            options,
            map: RwLock::new(HashMap::new()),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn truncation(&self) -> u32 {
        self.truncation
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn get_or_solve(&self, p: &ReducedProblem) -> Result<Arc<MdpSolution>> {
        let key = cache_key(p);
        if let Some(sol) = self.map.read().expect("cache lock poisoned").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(sol));
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        // Solved outside the lock; a concurrent duplicate solve yields the
        // same solution because it depends on the key only.
        let sol = p
            .to_mdp(self.truncation)
            .and_then(|m| solve(&m, &self.options))
            .map_err(|e| Error::ReducedSolve {
                params: format!("{p:?}"),
                source: Box::new(e),
            })?;
        let sol = Arc::new(sol);
        let mut map = self.map.write().expect("cache lock poisoned");
        Ok(Arc::clone(map.entry(key).or_insert(sol)))
    }
}

/// Record of one decision, mirroring the sets the algorithm maintains.
#[derive(Clone, Debug, PartialEq)]
pub struct DispatchTrace {
    pub target: usize,
    pub least_loaded: usize,
    /// Users whose arrivals were decided to go to the least-loaded user.
    pub sent: Vec<usize>,
    /// Users still to be examined when the decision was made.
    pub remaining: Vec<usize>,
    /// Users that keep their own arrivals.
    pub passed: Vec<usize>,
    pub evaluations: usize,
}

/// Dispatcher for queue-unaware (mask-indexed) service rates.
#[derive(Clone, Debug)]
pub struct HeuristicDispatcher {
    lambda: Vec<f64>,
    /// Files/s, mask-indexed.
    rates: ServiceRateTable,
    solo: Vec<f64>,
    costs: CostModel,
    cache: Arc<DpCache>,
}

impl HeuristicDispatcher {
    /// `rates` must be a mask-indexed table in files/s.
    pub fn new(lambda: Vec<f64>, rates: ServiceRateTable, costs: CostModel, cache: Arc<DpCache>) -> Result<Self> {
        let n = lambda.len();
        if rates.is_queue_aware() {
            return Err(invalid("the heuristic needs queue-unaware (mask-indexed) service rates"));
        }
        if rates.num_users() != n || costs.num_users() != n {
            return Err(invalid("arrival, rate and cost dimensions disagree"));
        }
        costs.validate()?;
        let solo: Vec<f64> = (0..n)
            .map(|l| {
                let mut e = vec![0; n];
                e[l] = 1;
                rates.rates(&e)[l]
            })
            .collect();
        if solo.iter().any(|r| !(*r > 0.0)) {
            return Err(invalid("every user needs a positive solo service rate"));
        }
        Ok(HeuristicDispatcher {
            lambda,
            rates,
            solo,
            costs,
            cache,
        })
    }

    pub fn cache(&self) -> &Arc<DpCache> {
        &self.cache
    }

    pub fn num_users(&self) -> usize {
        self.lambda.len()
    }

    /// Solo service rates `μ_l(e_l)` in files/s.
    pub fn solo_rates(&self) -> &[f64] {
        &self.solo
    }

    pub fn dispatch(&self, arriving: usize, q: &[u32]) -> Result<usize> {
        Ok(self.dispatch_traced(arriving, q)?.target)
    }

    pub fn dispatch_traced(&self, i: usize, q: &[u32]) -> Result<DispatchTrace> {
        let n = self.num_users();
        if i >= n || q.len() != n {
            return Err(invalid(format!("arrival at user {i} with a {}-user state", q.len())));
        }
        let ones = vec![1.0; n];
        let j = least_workload_user(q, &self.solo, &ones);
        if j == i {
            return Ok(DispatchTrace {
                target: i,
                least_loaded: j,
                sent: vec![j],
                remaining: Vec::new(),
                passed: Vec::new(),
                evaluations: 0,
            });
        }
        let mut sent = vec![j];
        let mut remaining: Vec<usize> = (0..n).filter(|&l| l != j).collect();
        let mut passed = Vec::new();

        let q1: u32 = remaining.iter().map(|&l| q[l]).sum();
        let q2 = q[j];
        let all = vec![1u32; n];
        let mut all_but_j = all.clone();
        all_but_j[j] = 0;
        let mut only_j = vec![0u32; n];
        only_j[j] = 1;
        let sum_others = |qv: &[u32]| -> f64 {
            let r = self.rates.rates(qv);
            (0..n).filter(|&l| l != j).map(|l| r[l]).sum()
        };
        let mu_first_only = sum_others(&all_but_j);
        let mu_both = [sum_others(&all), self.rates.rates(&all)[j]];
        let mu_second_only = self.rates.rates(&only_j)[j];

        let mut evaluations = 0;
        while !remaining.is_empty() {
            let star = most_loaded(q, &self.solo, &remaining);
            let lambda1: f64 = (0..n).filter(|l| !sent.contains(l)).map(|l| self.lambda[l]).sum();
            let lambda2: f64 = sent.iter().map(|&l| self.lambda[l]).sum();
            let reduced = ReducedProblem {
                lambda: [lambda1, lambda2],
                mu_first_only,
                mu_second_only,
                mu_both,
                eta: [self.costs.eta[star][j], self.costs.eta[j][star]],
                phi: [self.costs.phi[star][j], self.costs.phi[j][star]],
                weight: [self.costs.weights[star][j], self.costs.weights[j][star]],
                q: [q1, q2],
            };
            let sol = self.cache.get_or_solve(&reduced)?;
            evaluations += 1;
            remaining.retain(|&l| l != star);
            if sol.action_clamped(&[q1, q2]) == TwoUserAction::U1ToU2 {
                if star == i {
                    return Ok(DispatchTrace {
                        target: j,
                        least_loaded: j,
                        sent,
                        remaining,
                        passed,
                        evaluations,
                    });
                }
                sent.push(star);
            } else {
                if star == i {
                    return Ok(DispatchTrace {
                        target: i,
                        least_loaded: j,
                        sent,
                        remaining,
                        passed,
                        evaluations,
                    });
                }
                passed.push(star);
            }
        }
        unreachable!("the arriving user is always examined before the candidate set runs out")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(x: f64) -> f64 {
        dequantize(quantize(x))
    }

    /// Symmetric greedy-like mask rates for `n` users: alone `a`, and with
    /// `k` non-empty queues each gets `a·g(k)/k`.
    fn mask_table(n: usize, solo: f64) -> ServiceRateTable {
        let gain = |k: usize| 1.0 + 0.3 * ((k as f64).ln());
        let rows: Vec<Vec<f64>> = (0..1usize << n)
            .map(|m| {
                let k = m.count_ones() as usize;
                (0..n)
                    .map(|i| if m & (1 << i) != 0 { solo * gain(k) / k as f64 } else { 0.0 })
                    .collect()
            })
            .collect();
        ServiceRateTable::from_mask_entries(n, &rows).unwrap()
    }

    #[test]
    fn least_workload_examples() {
        assert_eq!(least_workload_user(&[0, 5], &[1.0, 1.0], &[1.0, 1.0]), 0);
        assert_eq!(least_workload_user(&[4, 2], &[2.0, 1.0], &[1.0, 1.0]), 0);
        assert_eq!(least_workload_user(&[2, 2], &[1e6, 1e6], &[8e6, 16e6]), 0);
        assert_eq!(least_workload_user(&[2, 1], &[1e6, 1e6], &[8e6, 17e6]), 0);
        assert_eq!(least_workload_user(&[3, 1], &[1e6, 1e6], &[8e6, 16e6]), 1);
    }

    #[test]
    fn cache_key_quantization() {
        let base = ReducedProblem {
            lambda: [grid(0.2), grid(0.2)],
            mu_first_only: grid(0.4),
            mu_second_only: grid(0.4),
            mu_both: [grid(0.26), grid(0.26)],
            eta: [0.0, 0.0],
            phi: [1.0, 1.0],
            weight: [3.0, 3.0],
            q: [0, 0],
        };
        assert_eq!(cache_key(&base), cache_key(&base.clone()));
        let mut near = base.clone();
        near.mu_first_only *= 1.0 + 5e-6;
        assert_eq!(cache_key(&base), cache_key(&near));
        let mut swapped = base.clone();
        swapped.mu_first_only = grid(0.5);
        let mut other = swapped.clone();
        other.mu_first_only = swapped.mu_second_only;
        other.mu_second_only = swapped.mu_first_only;
        assert_ne!(cache_key(&swapped), cache_key(&other));
        let mut cost = base.clone();
        cost.weight[0] = 3.0000001;
        assert_ne!(cache_key(&base), cache_key(&cost));
    }

    #[test]
    fn cache_reuses_solutions() {
        let cache = Arc::new(DpCache::new(12));
        let d = HeuristicDispatcher::new(
            vec![0.1; 3],
            mask_table(3, 0.4),
            CostModel::uniform(3, 0.0, 1.0, 0.0).unwrap(),
            Arc::clone(&cache),
        )
        .unwrap();
        d.dispatch(0, &[5, 5, 0]).unwrap();
        let after_first = cache.len();
        d.dispatch(0, &[6, 4, 1]).unwrap();
        assert_eq!(cache.len(), after_first);
        assert!(cache.hits() > 0);
    }

    #[test]
    fn arrival_at_least_loaded_user_stays_home() {
        let d = HeuristicDispatcher::new(
            vec![0.1; 3],
            mask_table(3, 0.4),
            CostModel::uniform(3, 0.0, 1.0, 0.0).unwrap(),
            Arc::new(DpCache::new(12)),
        )
        .unwrap();
        let trace = d.dispatch_traced(2, &[4, 3, 0]).unwrap();
        assert_eq!(trace.target, 2);
        assert_eq!(trace.evaluations, 0);
    }

    #[test]
    fn evaluations_never_exceed_n_minus_one() {
        let n = 4;
        let d = HeuristicDispatcher::new(
            vec![0.08; n],
            mask_table(n, 0.4),
            CostModel::uniform(n, 0.0, 1.0, 2.0).unwrap(),
            Arc::new(DpCache::new(12)),
        )
        .unwrap();
        for a in 0..4u32 {
            for b in 0..4u32 {
                let q = [a, b, 2, 1];
                for i in 0..n {
                    let t = d.dispatch_traced(i, &q).unwrap();
                    assert!(t.evaluations < n);
                }
            }
        }
    }

    #[test]
    fn rejects_queue_aware_tables() {
        let table = ServiceRateTable::build(
            &crate::scheduler::SchedulerPolicy::lcq(),
            &[
                crate::channel::ChannelModel::on_off(1.0, 0.5, 2.0).unwrap(),
                crate::channel::ChannelModel::on_off(1.0, 0.5, 2.0).unwrap(),
            ],
            &crate::scheduler::TableOptions {
                truncation: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(HeuristicDispatcher::new(
            vec![0.1; 2],
            table,
            CostModel::uniform(2, 0.0, 1.0, 0.0).unwrap(),
            Arc::new(DpCache::new(10))
        )
        .is_err());
    }
}
