//! The uniformized average-cost dispatching MDP.
//!
//! States are per-user file counts truncated to a box `[0, T]^N`. From state
//! `q` the uniformized chain moves to `A_i q` (an arrival lands in queue `i`)
//! with probability `Σ_j σ_j^i λ_j / φ_u`, to `D_i q` (a file leaves queue `i`)
//! with probability `μ_i(q) / φ_u`, and stays put otherwise. Arrivals that
//! would leave the box and departures from empty queues are self-transitions;
//! see [`BoundaryRule`] for how blocked arrivals are valued.

mod solve;
mod structure;

pub use solve::{solve, solve_from, solve_observed, MdpSolution, SolveOptions};
pub use structure::{
    check_gain_reference, check_policy_stationarity, check_transition_probabilities, check_truncation,
    extract_switching_curves, extract_switching_curves_within, theorem_one_check, verify_delta_monotonicity,
    ColumnCurve, DeltaReport, DeltaViolation, GainReferenceCheck, ProbabilityCheck, StationarityCheck,
    SwitchingCurves, TheoremOneCheck, TruncationCheck,
};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scheduler::ServiceRateTable;

/// Entries at or above this are treated as infeasible user pairs.
pub const INFEASIBLE: f64 = 1e300;

/// Per-file forwarding delay `η_j^i`, rerouting energy `φ_j^i` and weight
/// `w_j^i`, indexed `[source j][target i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub eta: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

impl CostModel {
    pub fn new(eta: Vec<Vec<f64>>, phi: Vec<Vec<f64>>, weights: Vec<Vec<f64>>) -> Result<Self> {
        let c = CostModel { eta, phi, weights };
        c.validate()?;
        Ok(c)
    }

    /// Same `η`, `φ` and `w` for every ordered pair of distinct users.
    pub fn uniform(num_users: usize, eta: f64, phi: f64, weight: f64) -> Result<Self> {
        let m = |v: f64| -> Vec<Vec<f64>> {
            (0..num_users)
                .map(|j| (0..num_users).map(|i| if i == j { 0.0 } else { v }).collect())
                .collect()
        };
        Self::new(m(eta), m(phi), m(weight))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.eta.len();
        if n == 0 {
            return Err(invalid("cost model has no users"));
        }
        for (name, m) in [("eta", &self.eta), ("phi", &self.phi), ("weights", &self.weights)] {
            if m.len() != n || m.iter().any(|row| row.len() != n) {
                return Err(invalid(format!("{name} must be a {n}x{n} matrix")));
            }
            for (j, row) in m.iter().enumerate() {
                for (i, &v) in row.iter().enumerate() {
                    if v.is_nan() || v < 0.0 {
                        return Err(invalid(format!("{name}[{j}][{i}] = {v} must be non-negative")));
                    }
                    if i == j && v != 0.0 && name != "weights" {
                        return Err(invalid(format!("{name}[{j}][{j}] must be zero")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn num_users(&self) -> usize {
        self.eta.len()
    }

    /// `η_j^i + w_j^i φ_j^i`; infinite for infeasible pairs.
    pub fn penalty(&self, source: usize, target: usize) -> f64 {
        if source == target {
            return 0.0;
        }
        let phi = self.phi[source][target];
        if phi >= INFEASIBLE || self.eta[source][target] >= INFEASIBLE {
            return f64::INFINITY;
        }
        self.eta[source][target] + self.weights[source][target] * phi
    }

    pub fn feasible(&self, source: usize, target: usize) -> bool {
        self.penalty(source, target).is_finite()
    }

    /// Copy with every off-diagonal weight set to `w`.
    pub fn with_weight(&self, w: f64) -> Self {
        let mut out = self.clone();
        for (j, row) in out.weights.iter_mut().enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = if i == j { 0.0 } else { w };
            }
        }
        out
    }

    /// Whether all off-diagonal `η`, `φ`, `w` are identical.
    pub fn is_homogeneous(&self) -> bool {
        let n = self.num_users();
        let pick = |m: &Vec<Vec<f64>>| -> Vec<f64> {
            (0..n)
                .flat_map(|j| (0..n).filter(move |&i| i != j).map(move |i| (j, i)))
                .map(|(j, i)| m[j][i])
                .collect()
        };
        [&self.eta, &self.phi, &self.weights]
            .iter()
            .all(|m| pick(m).windows(2).all(|w| w[0] == w[1]))
    }

    /// Restricted to the listed users, in order.
    pub fn restrict(&self, users: &[usize]) -> Self {
        let sub = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            users.iter().map(|&j| users.iter().map(|&i| m[j][i]).collect()).collect()
        };
        CostModel {
            eta: sub(&self.eta),
            phi: sub(&self.phi),
            weights: sub(&self.weights),
        }
    }
}

/// A deterministic dispatching action: `targets[j]` is the queue that user
/// `j`'s new requests join.
pub type Targets = Vec<usize>;

/// `λ'_i = Σ_j σ_j^i λ_j` for a deterministic action.
pub fn arrival_rates_under(targets: &[usize], lambda: &[f64]) -> Result<Vec<f64>> {
    if targets.len() != lambda.len() {
        return Err(invalid("action and arrival vectors differ in length"));
    }
    let mut out = vec![0.0; lambda.len()];
    for (j, &i) in targets.iter().enumerate() {
        if i >= lambda.len() {
            return Err(invalid(format!("target {i} of source {j} is out of range")));
        }
        out[i] += lambda[j];
    }
    Ok(out)
}

/// The three sensible two-user controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TwoUserAction {
    #[serde(rename = "NONE")]
    None,
    /// User 1's arrivals join queue 2.
    #[serde(rename = "U1_TO_U2")]
    U1ToU2,
    /// User 2's arrivals join queue 1.
    #[serde(rename = "U2_TO_U1")]
    U2ToU1,
    /// Both users swap queues. Never optimal with non-negative costs.
    #[serde(rename = "SWAP")]
    Swap,
}

impl TwoUserAction {
    pub fn from_targets(targets: &[usize]) -> Self {
        match targets {
            [0, 1] => TwoUserAction::None,
            [1, 1] => TwoUserAction::U1ToU2,
            [0, 0] => TwoUserAction::U2ToU1,
            _ => TwoUserAction::Swap,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TwoUserAction::None => "NONE",
            TwoUserAction::U1ToU2 => "U1_TO_U2",
            TwoUserAction::U2ToU1 => "U2_TO_U1",
            TwoUserAction::Swap => "SWAP",
        }
    }
}

impl std::fmt::Display for TwoUserAction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Row-major indexing of the truncated box, user 0 fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct StateSpace {
    num_users: usize,
    truncation: u32,
    strides: Vec<usize>,
    len: usize,
}

impl StateSpace {
    pub fn new(num_users: usize, truncation: u32, cap: usize) -> Result<Self> {
        if num_users == 0 || num_users > 32 {
            return Err(invalid(format!("unsupported user count {num_users}")));
        }
        if truncation < 1 {
            return Err(invalid("truncation must be at least 1"));
        }
        let size = (truncation as u128 + 1).saturating_pow(num_users as u32);
        if size > cap as u128 {
            return Err(Error::ResourceLimit { size, cap });
        }
        let base = truncation as usize + 1;
        let strides = (0..num_users).map(|i| base.pow(i as u32)).collect();
        Ok(StateSpace {
            num_users,
            truncation,
            strides,
            len: size as usize,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn truncation(&self) -> u32 {
        self.truncation
    }

    pub fn stride(&self, user: usize) -> usize {
        self.strides[user]
    }

    /// Index of `q`, which must lie in the box.
    pub fn index(&self, q: &[u32]) -> usize {
        debug_assert!(q.iter().all(|&x| x <= self.truncation));
        q.iter().zip(&self.strides).map(|(&x, &s)| x as usize * s).sum()
    }

    /// Index of `q` with every coordinate clamped into the box.
    pub fn index_clamped(&self, q: &[u32]) -> usize {
        q.iter()
            .zip(&self.strides)
            .map(|(&x, &s)| x.min(self.truncation) as usize * s)
            .sum()
    }

    pub fn state(&self, mut index: usize) -> Vec<u32> {
        let base = self.truncation as usize + 1;
        (0..self.num_users)
            .map(|_| {
                let x = index % base;
                index /= base;
                x as u32
            })
            .collect()
    }
}

pub const DEFAULT_STATE_CAP: usize = 1 << 24;

/// Relative gap under which two targets count as equally good.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// How an arrival that would leave the box is valued.
///
/// Under every rule the chain stays put; only the continuation value differs.
/// `SelfLoop` uses `h(q)`, which makes a blocked arrival free, so the solved
/// policy steers traffic into long queues to make them overflow: with a 40-cell
/// box this corrupts the policy for backlogs from about 20 files on.
///
/// `MarginalCost` charges the blocked file what one more file costs in an
/// M/M/1 queue that holds the whole backlog and drains at the full-occupancy
/// rate: `h(q) + φ_u (|q| + 1) / (|λ| (μ_full − |λ|))`. The value is exact for
/// a single queue, needs no extra reads of `h`, and keeps the operator
/// stochastic, so value iteration converges as for the plain box. When
/// `μ_full ≤ |λ|` it degrades to `SelfLoop`.
///
/// `Quadratic` extrapolates `3h(q) − 3h(q − e_i) + h(q − 2e_i)`. It is
/// accurate once `h` has settled, but the negative weights make the iteration
/// non-contractive; early sweeps can grow by many orders of magnitude.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryRule {
    SelfLoop,
    #[default]
    MarginalCost,
    Quadratic,
}

impl BoundaryRule {
    /// How many cells inside the edge the closure reads.
    pub fn stencil_depth(self) -> u32 {
        match self {
            BoundaryRule::SelfLoop | BoundaryRule::MarginalCost => 0,
            BoundaryRule::Quadratic => 2,
        }
    }
}

/// The dispatching MDP with rates in files/s.
#[derive(Clone, Debug)]
pub struct MdpProblem {
    lambda: Vec<f64>,
    total_lambda: f64,
    rates: ServiceRateTable,
    costs: CostModel,
    space: StateSpace,
    uniformization_rate: f64,
    boundary: BoundaryRule,
    /// `Σ_i μ_i(1, …, 1)`.
    full_rate: f64,
    /// `φ_u / (|λ| (μ_full − |λ|))`, zero when the box cannot drain.
    block_cost_scale: f64,
    /// `|q|` per state.
    backlog: Vec<u32>,
    /// `μ(q)` per state, flattened `[state][user]`.
    mu: Vec<f64>,
    /// `A_i q` per state (self when at the box edge).
    up: Vec<u32>,
    /// `D_i q` per state (self when empty).
    down: Vec<u32>,
}

impl MdpProblem {
    /// `rates` must be in files/s. The uniformization rate is set to exactly
    /// `|λ| + max_q |μ(q)|` over the box.
    pub fn new(lambda: Vec<f64>, rates: ServiceRateTable, costs: CostModel, truncation: u32) -> Result<Self> {
        Self::with_cap(lambda, rates, costs, truncation, DEFAULT_STATE_CAP)
    }

    pub fn with_cap(
        lambda: Vec<f64>,
        rates: ServiceRateTable,
        costs: CostModel,
        truncation: u32,
        cap: usize,
    ) -> Result<Self> {
        let n = lambda.len();
        if rates.num_users() != n || costs.num_users() != n {
            return Err(Error::InvalidProblem(format!(
                "{n} arrival rates, {} rate-table users, {} cost-model users",
                rates.num_users(),
                costs.num_users()
            )));
        }
        if lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidProblem("arrival rates must be finite and non-negative".into()));
        }
        let total_lambda: f64 = lambda.iter().sum();
        if !(total_lambda > 0.0) {
            return Err(Error::InvalidProblem("total arrival rate |λ| must be positive".into()));
        }
        costs.validate()?;
        let space = StateSpace::new(n, truncation, cap)?;
        let mut mu = Vec::with_capacity(space.len() * n);
        let mut up = Vec::with_capacity(space.len() * n);
        let mut down = Vec::with_capacity(space.len() * n);
        let mut backlog = Vec::with_capacity(space.len());
        let mut max_total = 0.0f64;
        for s in 0..space.len() {
            let q = space.state(s);
            backlog.push(q.iter().sum::<u32>());
            let row = rates.rates(&q);
            max_total = max_total.max(row.iter().map(|v| v.abs()).sum());
            for i in 0..n {
                mu.push(if q[i] == 0 { 0.0 } else { row[i] });
                let st = space.stride(i);
                up.push(if q[i] < truncation { (s + st) as u32 } else { s as u32 });
                down.push(if q[i] > 0 { (s - st) as u32 } else { s as u32 });
            }
        }
        let full_rate = rates.rates(&vec![1; n]).iter().sum();
        let mut problem = MdpProblem {
            lambda,
            total_lambda,
            rates,
            costs,
            space,
            uniformization_rate: total_lambda + max_total,
            boundary: BoundaryRule::default(),
            full_rate,
            block_cost_scale: 0.0,
            backlog,
            mu,
            up,
            down,
        };
        problem.refresh_block_cost();
        Ok(problem)
    }

    fn refresh_block_cost(&mut self) {
        let slack = self.full_rate - self.total_lambda;
        self.block_cost_scale = if slack > 0.0 {
            self.uniformization_rate / (self.total_lambda * slack)
        } else {
            0.0
        };
    }

    /// Extra value charged to an arrival that would leave the box from state
    /// index `s` (zero unless the rule is `MarginalCost`).
    #[inline]
    pub(crate) fn block_cost(&self, s: usize) -> f64 {
        match self.boundary {
            BoundaryRule::MarginalCost => self.block_cost_scale * (self.backlog[s] + 1) as f64,
            _ => 0.0,
        }
    }

    /// Overrides the uniformization rate; it may only grow.
    pub fn with_uniformization_rate(mut self, rate: f64) -> Result<Self> {
        if !(rate >= self.uniformization_rate) {
            return Err(Error::InvalidProblem(format!(
                "uniformization rate {rate} is below the minimum {}",
                self.uniformization_rate
            )));
        }
        self.uniformization_rate = rate;
        self.refresh_block_cost();
        Ok(self)
    }

    pub fn with_boundary(mut self, rule: BoundaryRule) -> Self {
        self.boundary = rule;
        self
    }

    pub fn boundary(&self) -> BoundaryRule {
        self.boundary
    }

    /// Same problem with different costs (rates and box unchanged).
    pub fn with_costs(&self, costs: CostModel) -> Result<Self> {
        if costs.num_users() != self.num_users() {
            return Err(Error::InvalidProblem("cost model has the wrong user count".into()));
        }
        costs.validate()?;
        let mut out = self.clone();
        out.costs = costs;
        Ok(out)
    }

    pub fn num_users(&self) -> usize {
        self.lambda.len()
    }

    pub fn arrival_rates(&self) -> &[f64] {
        &self.lambda
    }

    pub fn total_arrival_rate(&self) -> f64 {
        self.total_lambda
    }

    pub fn rate_table(&self) -> &ServiceRateTable {
        &self.rates
    }

    pub fn costs(&self) -> &CostModel {
        &self.costs
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn truncation(&self) -> u32 {
        self.space.truncation()
    }

    pub fn num_states(&self) -> usize {
        self.space.len()
    }

    pub fn uniformization_rate(&self) -> f64 {
        self.uniformization_rate
    }

    /// `|λ| / Σ_i μ_i(1_N)`: at or above 1 the full-occupancy service
    /// capacity cannot keep up.
    pub fn load_advisory(&self) -> f64 {
        self.total_lambda / self.full_rate
    }

    #[inline]
    pub(crate) fn mu_at(&self, s: usize) -> &[f64] {
        let n = self.num_users();
        &self.mu[s * n..(s + 1) * n]
    }

    #[inline]
    pub(crate) fn up_at(&self, s: usize) -> &[u32] {
        let n = self.num_users();
        &self.up[s * n..(s + 1) * n]
    }

    #[inline]
    pub(crate) fn down_at(&self, s: usize) -> &[u32] {
        let n = self.num_users();
        &self.down[s * n..(s + 1) * n]
    }

    fn check_state(&self, q: &[u32]) -> Result<usize> {
        if q.len() != self.num_users() || q.iter().any(|&x| x > self.truncation()) {
            return Err(invalid(format!("state {q:?} is outside the truncation box")));
        }
        Ok(self.space.index(q))
    }

    fn check_targets(&self, targets: &[usize]) -> Result<()> {
        if targets.len() != self.num_users() || targets.iter().any(|&i| i >= self.num_users()) {
            return Err(invalid(format!("malformed action {targets:?}")));
        }
        Ok(())
    }

    /// `|q|/|λ| + Σ_j (λ_j/φ_u)(η_j^{σ_j} + w_j^{σ_j} φ_j^{σ_j})`.
    pub fn stage_cost(&self, q: &[u32], targets: &[usize]) -> Result<f64> {
        self.check_state(q)?;
        self.check_targets(targets)?;
        let backlog: f64 = q.iter().map(|&x| x as f64).sum();
        let routing: f64 = targets
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                if self.lambda[j] == 0.0 {
                    0.0
                } else {
                    self.lambda[j] / self.uniformization_rate * self.costs.penalty(j, i)
                }
            })
            .sum();
        Ok(backlog / self.total_lambda + routing)
    }

    /// Successor distribution under a deterministic action, one entry per
    /// event (arrival per source, departure per user, then the self-loop);
    /// entries may repeat a state.
    pub fn transitions(&self, q: &[u32], targets: &[usize]) -> Result<Vec<(Vec<u32>, f64)>> {
        let s = self.check_state(q)?;
        self.check_targets(targets)?;
        Ok(self
            .transition_indices(s, targets)
            .into_iter()
            .map(|(t, p)| (self.space.state(t), p))
            .collect())
    }

    pub(crate) fn transition_indices(&self, s: usize, targets: &[usize]) -> Vec<(usize, f64)> {
        let phi = self.uniformization_rate;
        let mut out = Vec::with_capacity(2 * self.num_users() + 1);
        let mut total = 0.0;
        for (j, &i) in targets.iter().enumerate() {
            let p = self.lambda[j] / phi;
            out.push((self.up_at(s)[i] as usize, p));
            total += p;
        }
        for (i, &m) in self.mu_at(s).iter().enumerate() {
            let p = m / phi;
            out.push((self.down_at(s)[i] as usize, p));
            total += p;
        }
        // Rounding can leave the self-loop a few ulps below zero when the
        // uniformization rate is tight.
        let stay = 1.0 - total;
        out.push((s, if stay < 0.0 && stay > -1e-12 { 0.0 } else { stay }));
        out
    }

    /// Continuation value `h(A_i q)` under the boundary rule.
    #[inline]
    pub(crate) fn arrival_value(&self, h: &[f64], s: usize, i: usize) -> f64 {
        let n = self.num_users();
        let up = self.up[s * n + i] as usize;
        if up != s {
            return h[up];
        }
        match self.boundary {
            BoundaryRule::SelfLoop => h[s],
            BoundaryRule::MarginalCost => h[s] + self.block_cost(s),
            BoundaryRule::Quadratic => {
                let d1 = self.down[s * n + i] as usize;
                let d2 = self.down[d1 * n + i] as usize;
                3.0 * h[s] - 3.0 * h[d1] + h[d2]
            }
        }
    }

    /// Per-target bracket `β_i = penalty(j, i) + h(A_i q) − h(q)` for source `j`.
    #[inline]
    pub(crate) fn beta(&self, h: &[f64], s: usize, source: usize, target: usize) -> f64 {
        self.costs.penalty(source, target) + self.arrival_value(h, s, target) - h[s]
    }

    /// One application of the right-hand side of the Bellman equation at
    /// state `s`, returning `(J-increment, targets)`: the value is
    /// `|q|/|λ| + Σ_i (μ_i/φ_u)[h(D_i q) − h(q)] + Σ_j (λ_j/φ_u) min_i β_i`.
    pub(crate) fn backup_index(&self, h: &[f64], s: usize, targets: &mut [usize]) -> f64 {
        let n = self.num_users();
        let phi = self.uniformization_rate;
        let here = h[s];
        let mut v = 0.0;
        let mut backlog = 0usize;
        let mut rest = s;
        let base = self.truncation() as usize + 1;
        for _ in 0..n {
            backlog += rest % base;
            rest /= base;
        }
        v += backlog as f64 / self.total_lambda;
        let mu = self.mu_at(s);
        let down = self.down_at(s);
        for i in 0..n {
            if mu[i] != 0.0 {
                v += mu[i] / phi * (h[down[i] as usize] - here);
            }
        }
        for j in 0..n {
            let (best, target) = self.best_target(h, s, j);
            targets[j] = target;
            if self.lambda[j] != 0.0 {
                v += self.lambda[j] / phi * best;
            }
        }
        v
    }

    /// Exact minimum of `β` for source `j`, and the tie-broken argmin: keep
    /// the source's own queue unless another target is better by more than a
    /// relative 1e-9, otherwise the lowest index among near-minimizers.
    #[inline]
    fn best_target(&self, h: &[f64], s: usize, j: usize) -> (f64, usize) {
        let n = self.num_users();
        let mut beta = [0.0f64; 32];
        let mut best = f64::INFINITY;
        for i in 0..n {
            beta[i] = self.beta(h, s, j, i);
            if beta[i] < best {
                best = beta[i];
            }
        }
        let tol = TIE_TOLERANCE * best.abs().max(1.0);
        if beta[j] <= best + tol {
            return (best, j);
        }
        let i = (0..n).find(|&i| beta[i] <= best + tol).unwrap_or(j);
        (best, i)
    }

    /// `β_own − min_{i≠j} β_i` for source `j` at `q`: positive when some
    /// other queue is strictly better, and within the tie tolerance of zero
    /// when the choice is numerically indifferent.
    pub fn reroute_advantage(&self, h: &[f64], q: &[u32], source: usize) -> Result<f64> {
        let s = self.check_state(q)?;
        if source >= self.num_users() || h.len() != self.num_states() {
            return Err(invalid("bad source or relative-value vector"));
        }
        let own = self.beta(h, s, source, source);
        let best_other = (0..self.num_users())
            .filter(|&i| i != source)
            .map(|i| self.beta(h, s, source, i))
            .fold(f64::INFINITY, f64::min);
        Ok(own - best_other)
    }

    /// Targets whose `β` for source `j` at `q` ties the minimum, in index order.
    pub fn tied_targets(&self, h: &[f64], q: &[u32], source: usize) -> Result<Vec<usize>> {
        let s = self.check_state(q)?;
        if source >= self.num_users() || h.len() != self.num_states() {
            return Err(invalid("bad source or relative-value vector"));
        }
        let beta: Vec<f64> = (0..self.num_users()).map(|i| self.beta(h, s, source, i)).collect();
        let best = beta.iter().copied().fold(f64::INFINITY, f64::min);
        Ok((0..beta.len()).filter(|&i| Self::is_tie(beta[i] - best, best)).collect())
    }

    /// Whether a gap between two `β` values around `scale` counts as a tie.
    pub fn is_tie(gap: f64, scale: f64) -> bool {
        gap.abs() <= TIE_TOLERANCE * scale.abs().max(1.0)
    }

    /// Bellman backup at `q` against relative values `h`.
    pub fn bellman_backup(&self, h: &[f64], q: &[u32]) -> Result<(f64, Targets)> {
        let s = self.check_state(q)?;
        if h.len() != self.num_states() {
            return Err(invalid("relative-value vector has the wrong length"));
        }
        let mut targets = vec![0; self.num_users()];
        let v = self.backup_index(h, s, &mut targets);
        Ok((v, targets))
    }

    /// Backup with a stochastic action `sigma[j][i]` in place of the
    /// per-source minimum.
    pub fn stochastic_backup(&self, h: &[f64], q: &[u32], sigma: &[Vec<f64>]) -> Result<f64> {
        let s = self.check_state(q)?;
        let n = self.num_users();
        if sigma.len() != n || sigma.iter().any(|r| r.len() != n) {
            return Err(invalid("sigma must be an N x N matrix"));
        }
        let phi = self.uniformization_rate;
        let backlog: u32 = q.iter().sum();
        let mut v = backlog as f64 / self.total_lambda;
        let mu = self.mu_at(s);
        let down = self.down_at(s);
        for i in 0..n {
            if mu[i] != 0.0 {
                v += mu[i] / phi * (h[down[i] as usize] - h[s]);
            }
        }
        for j in 0..n {
            if self.lambda[j] == 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for i in 0..n {
                if sigma[j][i] != 0.0 {
                    acc += sigma[j][i] * self.beta(h, s, j, i);
                }
            }
            v += self.lambda[j] / phi * acc;
        }
        Ok(v)
    }
}
