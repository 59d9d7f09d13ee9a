//! Large cells: users that cannot all hear each other are grouped into
//! clusters, and each cluster solves its own dispatching problem with service
//! rates scaled by the share of BS time it receives.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scheduler::ServiceRateTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub clusters: Vec<Vec<usize>>,
    /// Head of each cluster (its first member).
    pub cluster_heads: Vec<usize>,
    pub alpha: Vec<f64>,
    /// Slot range `[t_s, t_e]` the current `alpha` was estimated over.
    pub window: (u64, u64),
}

impl ClusterState {
    /// Clusters given explicitly; heads are the first listed members and
    /// `alpha` starts at an even split.
    pub fn from_groups(clusters: Vec<Vec<usize>>, num_users: usize) -> Result<Self> {
        let mut seen = vec![false; num_users];
        for c in &clusters {
            if c.is_empty() {
                return Err(invalid("clusters must be non-empty"));
            }
            for &u in c {
                if u >= num_users || seen[u] {
                    return Err(invalid(format!("user {u} is out of range or listed twice")));
                }
                seen[u] = true;
            }
        }
        if let Some(u) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("user {u} belongs to no cluster")));
        }
        let l = clusters.len();
        Ok(ClusterState {
            cluster_heads: clusters.iter().map(|c| c[0]).collect(),
            alpha: vec![1.0 / l as f64; l],
            clusters,
            window: (0, 0),
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Cluster index of every user.
    pub fn membership(&self) -> Vec<usize> {
        let n = self.clusters.iter().map(|c| c.len()).sum();
        let mut out = vec![0; n];
        for (l, c) in self.clusters.iter().enumerate() {
            for &u in c {
                out[u] = l;
            }
        }
        out
    }
}

/// Picks the `num_heads` users nearest the BS (at the origin, so largest mean
/// SNR) as heads, then lets every other user, in index order, join the first
/// cluster whose current members are all within `comm_range_m`. A user that
/// fits nowhere starts a cluster of its own, which later users may join.
pub fn form_clusters(positions: &[[f64; 2]], comm_range_m: f64, num_heads: usize) -> Result<ClusterState> {
    if num_heads == 0 {
        return Err(invalid("at least one cluster head is required"));
    }
    if positions.iter().flatten().any(|x| !x.is_finite()) || comm_range_m.is_nan() {
        return Err(invalid("positions and range must be finite"));
    }
    let n = positions.len();
    let dist = |a: usize, b: usize| (positions[a][0] - positions[b][0]).hypot(positions[a][1] - positions[b][1]);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (positions[a][0].hypot(positions[a][1]), positions[b][0].hypot(positions[b][1]));
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let mut heads: Vec<usize> = order.into_iter().take(num_heads.min(n)).collect();
    heads.sort_unstable();
    let mut clusters: Vec<Vec<usize>> = heads.iter().map(|&h| vec![h]).collect();
    for u in (0..n).filter(|u| !heads.contains(u)) {
        match clusters.iter().position(|c| c.iter().all(|&m| dist(u, m) <= comm_range_m)) {
            Some(l) => clusters[l].push(u),
            None => clusters.push(vec![u]),
        }
    }
    ClusterState::from_groups(clusters, n)
}

/// Running count of slots in which the BS served a non-empty queue of each
/// cluster.
#[derive(Clone, Debug)]
pub struct AlphaEstimator {
    cluster_of: Vec<usize>,
    served: Vec<u64>,
    slots: u64,
}

impl AlphaEstimator {
    pub fn new(cluster_of: Vec<usize>, num_clusters: usize) -> Self {
        AlphaEstimator {
            cluster_of,
            served: vec![0; num_clusters],
            slots: 0,
        }
    }

    /// One slot: `q` are the queue lengths at the slot, `served` the queue the
    /// BS transmitted from, if any.
    #[inline]
    pub fn observe(&mut self, q: &[u32], served: Option<usize>) {
        if let Some(i) = served {
            if q[i] > 0 {
                self.served[self.cluster_of[i]] += 1;
            }
        }
        self.slots += 1;
    }

    /// `k` slots in which nothing was served.
    pub fn observe_idle(&mut self, k: u64) {
        self.slots += k;
    }

    pub fn slots(&self) -> u64 {
        self.slots
    }

    pub fn served(&self) -> &[u64] {
        &self.served
    }

    pub fn alpha(&self) -> Result<Vec<f64>> {
        if self.slots == 0 {
            return Err(invalid("empty estimation window"));
        }
        Ok(self.served.iter().map(|&s| s as f64 / self.slots as f64).collect())
    }

    pub fn reset(&mut self) {
        self.served.iter_mut().for_each(|s| *s = 0);
        self.slots = 0;
    }
}

/// One slot of history: queue lengths and the queue served.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotObservation {
    pub queues: Vec<u32>,
    pub served: Option<usize>,
}

/// Share of slots in `[t_s, t_e]` (inclusive indices into `history`) in
/// which each cluster had a non-empty queue served.
pub fn estimate_alpha(clusters: &ClusterState, history: &[SlotObservation], window: (usize, usize)) -> Result<Vec<f64>> {
    let (ts, te) = window;
    if ts > te || te >= history.len() {
        return Err(invalid(format!(
            "window [{ts}, {te}] is empty or outside {} slots",
            history.len()
        )));
    }
    let mut est = AlphaEstimator::new(clusters.membership(), clusters.num_clusters());
    for obs in &history[ts..=te] {
        est.observe(&obs.queues, obs.served);
    }
    est.alpha()
}

/// Cluster service rates: every entry multiplied by `alpha`.
pub fn scaled_rates(alpha: f64, base: &ServiceRateTable) -> Result<ServiceRateTable> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(base.scaled(alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelModel;
    use crate::scheduler::{SchedulerPolicy, TableOptions};
    use proptest::prelude::*;

    fn obs(q: &[u32], served: Option<usize>) -> SlotObservation {
        SlotObservation {
            queues: q.to_vec(),
            served,
        }
    }

    fn two_pairs() -> ClusterState {
        ClusterState::from_groups(vec![vec![0, 1], vec![2, 3]], 4).unwrap()
    }

    #[test]
    fn all_in_range_two_heads() {
        let pos = [[50.0, 0.0], [0.0, 30.0], [-40.0, 0.0], [0.0, -60.0]];
        let c = form_clusters(&pos, 1e3, 2).unwrap();
        assert_eq!(c.num_clusters(), 2);
        assert!(c.cluster_heads.contains(&1), "closest user heads a cluster");
        assert!(c.cluster_heads.contains(&2));
        // Users join the first cluster that accepts them.
        assert_eq!(c.clusters, vec![vec![1, 0, 3], vec![2]]);
    }

    #[test]
    fn zero_range_gives_singletons() {
        let pos = [[10.0, 0.0], [20.0, 0.0], [30.0, 0.0]];
        let c = form_clusters(&pos, 0.0, 1).unwrap();
        assert_eq!(c.clusters, vec![vec![0], vec![1], vec![2]]);
    }

    /// Exhaustive feasibility: every cluster is a clique apart from the
    /// heads, and no user could have joined an earlier cluster given the
    /// members present when it arrived.
    fn check_greedy_join(pos: &[[f64; 2]], range: f64, c: &ClusterState) {
        let d = |a: usize, b: usize| (pos[a][0] - pos[b][0]).hypot(pos[a][1] - pos[b][1]);
        let mut seen = vec![0; pos.len()];
        for cl in &c.clusters {
            for &u in cl {
                seen[u] += 1;
            }
            for &a in cl {
                for &b in cl {
                    assert!(d(a, b) <= range || a == b, "{a} and {b} share a cluster out of range");
                }
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
        let heads = &c.cluster_heads;
        for (l, cl) in c.clusters.iter().enumerate() {
            for &u in cl.iter().filter(|u| !heads.contains(u)) {
                for earlier in &c.clusters[..l] {
                    let present: Vec<usize> = earlier.iter().copied().filter(|&m| heads.contains(&m) || m < u).collect();
                    if present.is_empty() {
                        continue;
                    }
                    assert!(
                        present.iter().any(|&m| d(u, m) > range),
                        "user {u} could have joined {earlier:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn line_with_neighbor_range() {
        let pos: Vec<[f64; 2]> = (0..5).map(|i| [30.0 + 20.0 * i as f64, 0.0]).collect();
        let c = form_clusters(&pos, 25.0, 2).unwrap();
        check_greedy_join(&pos, 25.0, &c);
        assert_eq!(c.clusters, vec![vec![0], vec![1, 2], vec![3, 4]]);
    }

    #[test]
    fn alpha_examples() {
        let c = two_pairs();
        let hist: Vec<_> = (0..6).map(|_| obs(&[1, 0, 2, 0], Some(0))).collect();
        assert_eq!(estimate_alpha(&c, &hist, (0, 5)).unwrap(), vec![1.0, 0.0]);
        let alt: Vec<_> = (0..8).map(|t| obs(&[1, 1, 1, 1], Some(if t % 2 == 0 { 1 } else { 3 }))).collect();
        assert_eq!(estimate_alpha(&c, &alt, (0, 7)).unwrap(), vec![0.5, 0.5]);
        // Serving an empty queue does not count.
        let idle = vec![obs(&[0, 0, 0, 0], Some(2)), obs(&[0, 0, 1, 0], Some(2))];
        assert_eq!(estimate_alpha(&c, &idle, (0, 1)).unwrap(), vec![0.0, 0.5]);
        assert!(estimate_alpha(&c, &idle, (1, 0)).is_err());
        assert!(estimate_alpha(&c, &idle, (0, 2)).is_err());
    }

    #[test]
    fn scaled_rates_linear() {
        let models: Vec<_> = (0..2).map(|_| ChannelModel::on_off(1e6, 0.5, 2.0).unwrap()).collect();
        let t = ServiceRateTable::build(&SchedulerPolicy::greedy(), &models, &TableOptions::default()).unwrap();
        assert_eq!(scaled_rates(1.0, &t).unwrap(), t);
        let h = scaled_rates(0.5, &t).unwrap();
        for ((_, a), (_, b)) in t.entries().zip(h.entries()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*y, x * 0.5);
            }
        }
        assert!(scaled_rates(1.5, &t).is_err());
    }

    #[test]
    fn bad_groups_rejected() {
        assert!(ClusterState::from_groups(vec![vec![0], vec![0, 1]], 2).is_err());
        assert!(ClusterState::from_groups(vec![vec![0]], 2).is_err());
        assert!(ClusterState::from_groups(vec![vec![], vec![0, 1]], 2).is_err());
    }

    proptest! {
        #[test]
        fn alpha_scale_free(served in proptest::collection::vec(proptest::option::of(0usize..4), 1..60)) {
            let c = two_pairs();
            let hist: Vec<_> = served.iter().map(|&s| obs(&[1, 1, 1, 1], s)).collect();
            let doubled: Vec<_> = hist.iter().flat_map(|o| [o.clone(), o.clone()]).collect();
            let a = estimate_alpha(&c, &hist, (0, hist.len() - 1)).unwrap();
            let b = estimate_alpha(&c, &doubled, (0, doubled.len() - 1)).unwrap();
            prop_assert_eq!(a.clone(), b);
            prop_assert!(a.iter().sum::<f64>() <= 1.0 + 1e-12);
        }

        #[test]
        fn formation_is_feasible_and_deterministic(
            pts in proptest::collection::vec((-150.0f64..150.0, -150.0f64..150.0), 1..9),
            range in 0.0f64..200.0,
            heads in 1usize..4,
        ) {
            let pos: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
            let c = form_clusters(&pos, range, heads).unwrap();
            check_greedy_join(&pos, range, &c);
            prop_assert_eq!(c.clone(), form_clusters(&pos, range, heads).unwrap());
        }
    }
}
