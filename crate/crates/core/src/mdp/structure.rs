//! Structural checks on solved dispatching policies.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::Serialize;

use super::{solve, solve_from, solve_observed, MdpProblem, MdpSolution, SolveOptions, TwoUserAction};
use crate::error::{invalid, Result};

const MAX_LISTED_VIOLATIONS: usize = 1000;

/// Action thresholds of one column `q1`. `q2a` is the largest `q2` with
/// `U1→U2` (−1 if none), `q2b` the smallest with `U2→U1` (`limit + 1` if none).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ColumnCurve {
    pub q1: u32,
    pub q2a: i64,
    pub q2b: i64,
    /// `U1→U2` cells are exactly `[0, q2a]`, `U2→U1` cells exactly
    /// `[q2b, limit]`, and nothing else but `NONE` lies between.
    pub contiguous: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SwitchingCurves {
    /// Largest coordinate scanned on either axis.
    pub limit: u32,
    pub columns: Vec<ColumnCurve>,
    /// Cells with `U1→U2` and `U2→U1` respectively.
    pub region_sizes: (usize, usize),
}

impl SwitchingCurves {
    pub fn all_contiguous(&self) -> bool {
        self.columns.iter().all(|c| c.contiguous)
    }

    pub fn non_contiguous_columns(&self) -> Vec<u32> {
        self.columns.iter().filter(|c| !c.contiguous).map(|c| c.q1).collect()
    }

    pub fn rerouting_cells(&self) -> usize {
        self.region_sizes.0 + self.region_sizes.1
    }
}

/// Curves over the whole box.
pub fn extract_switching_curves(solution: &MdpSolution) -> Result<SwitchingCurves> {
    extract_switching_curves_within(solution, solution.truncation())
}

/// Curves over `[0, limit]²`. Scanning `limit = T − 1` leaves out the box
/// edge, where overflow self-transitions distort the policy.
pub fn extract_switching_curves_within(solution: &MdpSolution, limit: u32) -> Result<SwitchingCurves> {
    if solution.num_users() != 2 {
        return Err(invalid("switching curves are defined for two-user solutions only"));
    }
    if limit > solution.truncation() {
        return Err(invalid("scan limit exceeds the truncation box"));
    }
    let mut columns = Vec::with_capacity(limit as usize + 1);
    let mut region_sizes = (0, 0);
    for q1 in 0..=limit {
        let actions: Vec<TwoUserAction> = (0..=limit).map(|q2| solution.action(&[q1, q2])).collect();
        let to2: Vec<i64> = idx_where(&actions, TwoUserAction::U1ToU2);
        let to1: Vec<i64> = idx_where(&actions, TwoUserAction::U2ToU1);
        region_sizes.0 += to2.len();
        region_sizes.1 += to1.len();
        let q2a = to2.last().copied().unwrap_or(-1);
        let q2b = to1.first().copied().unwrap_or(limit as i64 + 1);
        let contiguous = to2.len() as i64 == q2a + 1
            && to1.len() as i64 == limit as i64 + 1 - q2b
            && q2a < q2b
            && !actions.contains(&TwoUserAction::Swap);
        columns.push(ColumnCurve {
            q1,
            q2a,
            q2b,
            contiguous,
        });
    }
    Ok(SwitchingCurves {
        limit,
        columns,
        region_sizes,
    })
}

fn idx_where(actions: &[TwoUserAction], a: TwoUserAction) -> Vec<i64> {
    actions
        .iter()
        .enumerate()
        .filter(|(_, &x)| x == a)
        .map(|(i, _)| i as i64)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbabilityCheck {
    pub states_checked: usize,
    pub actions_checked: usize,
    pub min_probability: f64,
    pub max_sum_error: f64,
}

impl ProbabilityCheck {
    pub fn passed(&self) -> bool {
        self.min_probability >= 0.0 && self.max_sum_error <= 1e-12
    }
}

/// Transition probabilities at every state: all deterministic actions when
/// there are at most 64 of them, otherwise no-reroute plus the solution's
/// policy (if given).
pub fn check_transition_probabilities(problem: &MdpProblem, solution: Option<&MdpSolution>) -> ProbabilityCheck {
    let n = problem.num_users();
    let exhaustive = (n as u32) < 8 && (n as u64).pow(n as u32) <= 64;
    let mut out = ProbabilityCheck {
        states_checked: problem.num_states(),
        actions_checked: 0,
        min_probability: f64::INFINITY,
        max_sum_error: 0.0,
    };
    let visit = |s: usize, targets: &[usize], out: &mut ProbabilityCheck| {
        let tr = problem.transition_indices(s, targets);
        let sum: f64 = tr.iter().map(|t| t.1).sum();
        out.actions_checked += 1;
        out.max_sum_error = out.max_sum_error.max((sum - 1.0).abs());
        for (_, p) in tr {
            out.min_probability = out.min_probability.min(p);
        }
    };
    for s in 0..problem.num_states() {
        if exhaustive {
            let total = n.pow(n as u32);
            let mut targets = vec![0; n];
            for code in 0..total {
                let mut c = code;
                for t in targets.iter_mut() {
                    *t = c % n;
                    c /= n;
                }
                visit(s, &targets, &mut out);
            }
        } else {
            let own: Vec<usize> = (0..n).collect();
            visit(s, &own, &mut out);
            if let Some(sol) = solution {
                let t: Vec<usize> = sol.targets_at(s).iter().map(|&x| x as usize).collect();
                visit(s, &t, &mut out);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremOneCheck {
    pub states_checked: usize,
    pub actions_per_state: usize,
    /// `min (stochastic backup − deterministic backup)`; non-negative when
    /// deterministic actions are never beaten.
    pub min_margin: f64,
}

impl TheoremOneCheck {
    pub fn passed(&self) -> bool {
        self.min_margin >= -1e-12
    }
}

/// Compares the deterministic per-source minimum against random stochastic
/// dispatching matrices (rows uniform on the simplex) at random states.
pub fn theorem_one_check<R: Rng + ?Sized>(
    problem: &MdpProblem,
    h: &[f64],
    states: usize,
    actions_per_state: usize,
    rng: &mut R,
) -> Result<TheoremOneCheck> {
    if h.len() != problem.num_states() {
        return Err(invalid("relative-value vector has the wrong length"));
    }
    let n = problem.num_users();
    let mut min_margin = f64::INFINITY;
    for _ in 0..states {
        let s = rng.random_range(0..problem.num_states());
        let q = problem.space().state(s);
        let (det, _) = problem.bellman_backup(h, &q)?;
        for _ in 0..actions_per_state {
            let sigma: Vec<Vec<f64>> = (0..n)
                .map(|j| {
                    let row: Vec<f64> = (0..n)
                        .map(|i| {
                            if problem.costs().feasible(j, i) {
                                Exp1.sample(rng)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let total: f64 = row.iter().sum();
                    row.into_iter().map(|x| x / total).collect()
                })
                .collect();
            let v = problem.stochastic_backup(h, &q, &sigma)?;
            min_margin = min_margin.min(v - det);
        }
    }
    Ok(TheoremOneCheck {
        states_checked: states,
        actions_per_state,
        min_margin,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GainReferenceCheck {
    pub gain_origin: f64,
    pub gain_alternate: f64,
    pub difference: f64,
}

/// Solves with reference states `0` and `e_1` and compares the gains.
pub fn check_gain_reference(problem: &MdpProblem, opts: &SolveOptions) -> Result<GainReferenceCheck> {
    let mut alt = vec![0u32; problem.num_users()];
    alt[0] = 1;
    let a = solve(
        problem,
        &SolveOptions {
            reference: None,
            ..opts.clone()
        },
    )?;
    let b = solve(
        problem,
        &SolveOptions {
            reference: Some(alt),
            ..opts.clone()
        },
    )?;
    Ok(GainReferenceCheck {
        gain_origin: a.gain,
        gain_alternate: b.gain,
        difference: (a.gain - b.gain).abs(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StationarityCheck {
    pub differing_states: usize,
}

/// Re-solves from the converged values and counts states whose action moved.
pub fn check_policy_stationarity(
    problem: &MdpProblem,
    opts: &SolveOptions,
    solution: &MdpSolution,
) -> Result<StationarityCheck> {
    let again = solve_from(problem, opts, &solution.relative_values)?;
    let n = problem.num_users();
    let differing_states = solution
        .policy_raw()
        .chunks(n)
        .zip(again.policy_raw().chunks(n))
        .filter(|(a, b)| a != b)
        .count();
    Ok(StationarityCheck { differing_states })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TruncationCheck {
    /// Differences more than `margin` cells from the smaller box's edge.
    pub differing_interior: usize,
    pub differing_near_edge: usize,
}

/// Compares two solutions of the same problem on nested boxes over the
/// smaller box.
pub fn check_truncation(small: &MdpSolution, large: &MdpSolution, margin: u32) -> Result<TruncationCheck> {
    if small.num_users() != large.num_users() || small.truncation() > large.truncation() {
        return Err(invalid("solutions must share a user count with nested boxes"));
    }
    let t = small.truncation();
    let mut out = TruncationCheck {
        differing_interior: 0,
        differing_near_edge: 0,
    };
    for s in 0..small.space().len() {
        let q = small.space().state(s);
        if small.targets_at(s) != large.targets(&q) {
            if q.iter().any(|&x| x + margin >= t) {
                out.differing_near_edge += 1;
            } else {
                out.differing_interior += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaViolation {
    pub iteration: usize,
    pub q1: u32,
    pub q2: u32,
    /// `Δ_k(q1, q2) − Δ_k(q1 + 1, q2)`, positive when monotonicity fails.
    pub magnitude: f64,
    /// The comparison touches a state whose value feeds the boundary
    /// extrapolation (the edge itself plus the rule's stencil depth).
    pub boundary: bool,
}

/// `Δ_k(q) = J_k(q + e_1) − J_k(q + e_2)` for `q ∈ [0, T−1]²` over all
/// value-iteration stages, checked for monotonicity in `q_1`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaReport {
    pub truncation: u32,
    pub iterations: usize,
    pub violations: Vec<DeltaViolation>,
    pub interior_violations: usize,
    pub boundary_violations: usize,
    pub max_interior_violation: f64,
    pub max_boundary_violation: f64,
    /// `max |Δ_k(q1, q2) + Δ_k(q2, q1)|`.
    pub max_antisymmetry_error: f64,
    /// Final `Δ`, row-major in `q1` then `q2`, side `T`.
    pub final_delta: Vec<f64>,
    /// Every `Δ_k`, when requested.
    pub history: Option<Vec<Vec<f64>>>,
}

impl DeltaReport {
    pub fn monotone_interior(&self) -> bool {
        self.interior_violations == 0
    }

    pub fn delta(&self, q1: u32, q2: u32) -> f64 {
        self.final_delta[(q1 * self.truncation + q2) as usize]
    }
}

/// Runs value iteration from `J_0 ≡ 0` and scans every `Δ_k`.
///
/// Requires a symmetric two-user problem: equal arrival rates, homogeneous
/// costs and `μ(a, b)` equal to `μ(b, a)` with the users swapped.
pub fn verify_delta_monotonicity(problem: &MdpProblem, opts: &SolveOptions, keep_history: bool) -> Result<DeltaReport> {
    if problem.num_users() != 2 {
        return Err(invalid("the monotonicity scan needs exactly two users"));
    }
    let lambda = problem.arrival_rates();
    if lambda[0] != lambda[1] {
        return Err(invalid("the monotonicity scan needs equal arrival rates"));
    }
    if !problem.costs().is_homogeneous() {
        return Err(invalid("the monotonicity scan needs homogeneous costs"));
    }
    let t = problem.truncation();
    for a in 0..=t {
        for b in 0..=t {
            let x = problem.rate_table().rates(&[a, b]);
            let y = problem.rate_table().rates(&[b, a]);
            if (x[0] - y[1]).abs() > 1e-12 * x[0].abs().max(1.0) {
                return Err(invalid("the monotonicity scan needs symmetric service rates"));
            }
        }
    }
    let space = problem.space().clone();
    let side = t as usize;
    let margin = problem.boundary().stencil_depth();
    let mut report = DeltaReport {
        truncation: t,
        iterations: 0,
        violations: Vec::new(),
        interior_violations: 0,
        boundary_violations: 0,
        max_interior_violation: 0.0,
        max_boundary_violation: 0.0,
        max_antisymmetry_error: 0.0,
        final_delta: vec![0.0; side * side],
        history: keep_history.then(Vec::new),
    };
    let mut delta = vec![0.0; side * side];
    solve_observed(problem, opts, None, |k, h| {
        for q1 in 0..t {
            for q2 in 0..t {
                delta[(q1 * t + q2) as usize] = h[space.index(&[q1 + 1, q2])] - h[space.index(&[q1, q2 + 1])];
            }
        }
        for q2 in 0..t {
            for q1 in 0..t.saturating_sub(1) {
                let lo = delta[(q1 * t + q2) as usize];
                let hi = delta[((q1 + 1) * t + q2) as usize];
                let excess = lo - hi;
                if excess > 1e-9 * lo.abs().max(hi.abs()).max(1.0) {
                    let boundary = q1 + 2 + margin >= t || q2 + 1 + margin >= t;
                    if boundary {
                        report.boundary_violations += 1;
                        report.max_boundary_violation = report.max_boundary_violation.max(excess);
                    } else {
                        report.interior_violations += 1;
                        report.max_interior_violation = report.max_interior_violation.max(excess);
                    }
                    if report.violations.len() < MAX_LISTED_VIOLATIONS {
                        report.violations.push(DeltaViolation {
                            iteration: k,
                            q1,
                            q2,
                            magnitude: excess,
                            boundary,
                        });
                    }
                }
            }
        }
        for q1 in 0..t {
            for q2 in 0..t {
                let e = (delta[(q1 * t + q2) as usize] + delta[(q2 * t + q1) as usize]).abs();
                report.max_antisymmetry_error = report.max_antisymmetry_error.max(e);
            }
        }
        if let Some(hist) = report.history.as_mut() {
            hist.push(delta.clone());
        }
        report.iterations = k;
    })?;
    report.final_delta = delta;
    Ok(report)
}
