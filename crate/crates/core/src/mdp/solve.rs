use serde::{Deserialize, Serialize};

use super::{MdpProblem, StateSpace, TwoUserAction};
use crate::error::{invalid, Error, Result};
use crate::parallel::{fill_chunks, Execution};

/// States per work unit in a parallel sweep.
const SWEEP_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    /// Stop once the span of `Th − h` falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Reference state pinned to `h = 0`; all-zeros when `None`.
    pub reference: Option<Vec<u32>>,
    pub execution: Execution,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tolerance: 1e-8,
            max_iterations: 200_000,
            reference: None,
            execution: Execution::default(),
        }
    }
}

/// Converged relative values and the greedy deterministic policy.
#[derive(Clone, Debug)]
pub struct MdpSolution {
    /// Optimal average cost per uniformized stage.
    pub gain: f64,
    pub relative_values: Vec<f64>,
    pub iterations: usize,
    /// Span of the last Bellman residual.
    pub residual_span: f64,
    pub uniformization_rate: f64,
    space: StateSpace,
    reference: usize,
    /// Target per source, flattened `[state][source]`.
    policy: Vec<u8>,
}

impl MdpSolution {
    /// Gain converted from per-stage to per-second units (`J*·φ_u`).
    pub fn gain_per_second(&self) -> f64 {
        self.gain * self.uniformization_rate
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn num_users(&self) -> usize {
        self.space.num_users()
    }

    pub fn truncation(&self) -> u32 {
        self.space.truncation()
    }

    pub fn reference_state(&self) -> Vec<u32> {
        self.space.state(self.reference)
    }

    pub fn value(&self, q: &[u32]) -> f64 {
        self.relative_values[self.space.index(q)]
    }

    /// Targets at an in-box state.
    pub fn targets(&self, q: &[u32]) -> &[u8] {
        self.targets_at(self.space.index(q))
    }

    /// Targets at `q` with each coordinate clamped into the box.
    pub fn targets_clamped(&self, q: &[u32]) -> &[u8] {
        self.targets_at(self.space.index_clamped(q))
    }

    pub fn targets_at(&self, index: usize) -> &[u8] {
        let n = self.num_users();
        &self.policy[index * n..(index + 1) * n]
    }

    fn two_user(&self, t: &[u8]) -> TwoUserAction {
        debug_assert_eq!(t.len(), 2);
        TwoUserAction::from_targets(&[t[0] as usize, t[1] as usize])
    }

    /// Two-user control at an in-box state.
    pub fn action(&self, q: &[u32]) -> TwoUserAction {
        self.two_user(self.targets(q))
    }

    pub fn action_clamped(&self, q: &[u32]) -> TwoUserAction {
        self.two_user(self.targets_clamped(q))
    }

    /// Whether any source is routed away from its own queue anywhere.
    pub fn reroutes_anywhere(&self) -> bool {
        let n = self.num_users();
        self.policy.chunks(n).any(|t| t.iter().enumerate().any(|(j, &i)| i as usize != j))
    }

    pub(crate) fn policy_raw(&self) -> &[u8] {
        &self.policy
    }
}

pub fn solve(problem: &MdpProblem, opts: &SolveOptions) -> Result<MdpSolution> {
    solve_observed(problem, opts, None, |_, _| {})
}

/// Relative value iteration started from `initial` instead of `h ≡ 0`.
pub fn solve_from(problem: &MdpProblem, opts: &SolveOptions, initial: &[f64]) -> Result<MdpSolution> {
    solve_observed(problem, opts, Some(initial), |_, _| {})
}

/// Relative value iteration calling `observer(k, h_k)` before every sweep.
///
/// `h_k` differs from the undiscounted `k`-stage cost `J_k` only by the
/// constant `J_k(reference)`, so differences of `h_k` are differences of `J_k`.
pub fn solve_observed<F>(
    problem: &MdpProblem,
    opts: &SolveOptions,
    initial: Option<&[f64]>,
    mut observer: F,
) -> Result<MdpSolution>
where
    F: FnMut(usize, &[f64]),
{
    let n = problem.num_users();
    let states = problem.num_states();
    if n > u8::MAX as usize {
        return Err(invalid("too many users for a policy table"));
    }
    if !(opts.tolerance > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    let reference = match &opts.reference {
        None => 0,
        Some(q) => {
            if q.len() != n || q.iter().any(|&x| x > problem.truncation()) {
                return Err(invalid(format!("reference state {q:?} is outside the box")));
            }
            problem.space().index(q)
        }
    };
    let probs = super::check_transition_probabilities(problem, None);
    if !probs.passed() {
        return Err(Error::InvalidProblem(format!(
            "transition probabilities are invalid (min {:.3e}, worst sum error {:.3e})",
            probs.min_probability, probs.max_sum_error
        )));
    }

    let mut h = match initial {
        Some(h0) => {
            if h0.len() != states {
                return Err(invalid("initial relative values have the wrong length"));
            }
            let r = h0[reference];
            h0.iter().map(|v| v - r).collect()
        }
        None => vec![0.0; states],
    };
    let mut th = vec![0.0; states];
    let mut span = f64::INFINITY;
    let mut gain = f64::NAN;
    let mut iterations = 0;
    // Spans of a stochastic operator never grow. Quadratic extrapolation
    // lets them grow for a while; runaway growth means it will not settle.
    let mut min_span = f64::INFINITY;
    while iterations < opts.max_iterations {
        observer(iterations, &h);
        sweep(problem, opts.execution, &h, &mut th);
        iterations += 1;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (a, b) in th.iter().zip(&h) {
            let d = a - b;
            lo = lo.min(d);
            hi = hi.max(d);
        }
        span = hi - lo;
        gain = 0.5 * (hi + lo);
        let r = th[reference];
        for (dst, v) in h.iter_mut().zip(&th) {
            *dst = v - r;
        }
        min_span = min_span.min(span);
        if !span.is_finite() || span > DIVERGENCE_FACTOR * min_span.max(1.0) {
            break;
        }
        if span < opts.tolerance {
            observer(iterations, &h);
            let policy = greedy_policy(problem, opts.execution, &h);
            return Ok(MdpSolution {
                gain,
                relative_values: h,
                iterations,
                residual_span: span,
                uniformization_rate: problem.uniformization_rate(),
                space: problem.space().clone(),
                reference,
                policy,
            });
        }
    }
    let _ = gain;
    Err(Error::NotConverged { iterations, span })
}

const DIVERGENCE_FACTOR: f64 = 1e6;

/// One Jacobi sweep: `out = Th` read entirely from `h`.
fn sweep(problem: &MdpProblem, exec: Execution, h: &[f64], out: &mut [f64]) {
    let n = problem.num_users();
    fill_chunks(exec, out, SWEEP_CHUNK, |start, block| {
        let mut targets = vec![0usize; n];
        for (o, dst) in block.iter_mut().enumerate() {
            let s = start + o;
            *dst = h[s] + problem.backup_index(h, s, &mut targets);
        }
    });
}

fn greedy_policy(problem: &MdpProblem, exec: Execution, h: &[f64]) -> Vec<u8> {
    let n = problem.num_users();
    let mut policy = vec![0u8; problem.num_states() * n];
    fill_chunks(exec, &mut policy, SWEEP_CHUNK * n, |start, block| {
        let mut targets = vec![0usize; n];
        for (k, row) in block.chunks_mut(n).enumerate() {
            let s = start / n + k;
            problem.backup_index(h, s, &mut targets);
            for (dst, &t) in row.iter_mut().zip(&targets) {
                *dst = t as u8;
            }
        }
    });
    policy
}
