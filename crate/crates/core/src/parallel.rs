//! Execution strategy for the data-parallel loops.
//!
//! Every parallel loop in the crate is a pure map over an index range whose
//! results are gathered in index order, so `Sequential` and `Parallel` return
//! bit-identical values.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    /// Uses rayon's global pool. Without the `parallel` feature this runs
    /// sequentially.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Maps `f` over `0..len`, collecting results in index order.
pub(crate) fn map_indexed<T, F>(exec: Execution, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..len).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..len).map(f).collect()
}

/// Writes `f(i, &mut out[i])` for every slot, chunked so that each chunk is a
/// contiguous block of at least `min_chunk` entries.
pub(crate) fn fill_chunks<T, F>(exec: Execution, out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && out.len() > chunk {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(c, block)| f(c * chunk, block));
        return;
    }
    let _ = exec;
    for (c, block) in out.chunks_mut(chunk).enumerate() {
        f(c * chunk, block);
    }
}
