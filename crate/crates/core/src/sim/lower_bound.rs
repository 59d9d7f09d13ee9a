//! BS-side rerouting used to bound the achievable delay from below.
//!
//! When the user with the best instantaneous rate has nothing queued, the BS
//! delivers data from another queue to that user instead, preferring data the
//! user owns, then data already in transit for a third party, and finally
//! native data while the ledger of BS-rerouted bits is in credit.

use serde::Serialize;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LowerBoundState {
    /// Signed ledger of rerouted bits: debited when the BS returns a user's
    /// own data from a foreign queue, credited when it pushes native data to
    /// someone else. Starts at zero and may go negative.
    pub theta_bs: f64,
}

/// Which branch of the BS rule fired.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LowerBoundBranch {
    /// Head-of-line data owned by the best-rate user.
    OwnData,
    /// Head-of-line data already rerouted by its owner.
    ForeignData,
    /// Longest queue, paid for out of the ledger.
    LedgerCredit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LowerBoundDecision {
    /// Run the base scheduler.
    Fallthrough,
    /// Drain `queue`'s head-of-line file at `via`'s instantaneous rate.
    Serve {
        queue: usize,
        via: usize,
        branch: LowerBoundBranch,
    },
}

impl LowerBoundState {
    /// Books `served_bits` according to the branch that produced them.
    pub fn record(&mut self, decision: LowerBoundDecision, served_bits: f64) {
        if let LowerBoundDecision::Serve { branch, .. } = decision {
            match branch {
                LowerBoundBranch::OwnData => self.theta_bs -= served_bits,
                LowerBoundBranch::ForeignData => {}
                LowerBoundBranch::LedgerCredit => self.theta_bs += served_bits,
            }
        }
    }
}

/// One slot of the BS rule.
///
/// `rates` are instantaneous rates, `q` file counts, and `hol_owner[i]` the
/// original owner of queue `i`'s head-of-line file (`None` when empty). The
/// best-rate user is the lowest index among maximizers; when several queues
/// qualify for a branch the longest (then lowest-index) one is served.
pub fn lower_bound_schedule(
    rates: &[f64],
    q: &[u32],
    hol_owner: &[Option<usize>],
    state: &LowerBoundState,
) -> LowerBoundDecision {
    let n = rates.len();
    if n == 0 {
        return LowerBoundDecision::Fallthrough;
    }
    let mut j = 0;
    for i in 1..n {
        if rates[i] > rates[j] {
            j = i;
        }
    }
    if q[j] > 0 || rates[j] <= 0.0 {
        return LowerBoundDecision::Fallthrough;
    }
    let longest = |pred: &dyn Fn(usize) -> bool| -> Option<usize> {
        (0..n)
            .filter(|&i| q[i] > 0 && pred(i))
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if q[b] >= q[i] => Some(b),
                _ => Some(i),
            })
    };
    let serve = |queue, branch| LowerBoundDecision::Serve { queue, via: j, branch };
    if let Some(k) = longest(&|i| hol_owner[i] == Some(j)) {
        return serve(k, LowerBoundBranch::OwnData);
    }
    if let Some(k) = longest(&|i| matches!(hol_owner[i], Some(b) if b != i)) {
        return serve(k, LowerBoundBranch::ForeignData);
    }
    if state.theta_bs < 0.0 {
        if let Some(k) = longest(&|_| true) {
            return serve(k, LowerBoundBranch::LedgerCredit);
        }
    }
    LowerBoundDecision::Fallthrough
}
