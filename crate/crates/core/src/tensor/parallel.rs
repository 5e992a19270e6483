//! Global switch for intra-op parallelism.
//!
//! Parallel kernels split work over the batch dimension only and reduce
//! per-sample partial results in sample order, so outputs do not depend on
//! scheduling. The switch is off by default.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(false);

pub fn set_enabled(on: bool) {
    PARALLEL.store(on, Ordering::SeqCst);
}

pub fn enabled() -> bool {
    PARALLEL.load(Ordering::SeqCst)
}

/// Runs `f` on every `(index, chunk)` pair, in parallel when enabled.
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    if enabled() {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Maps `0..n` to a vector of results, preserving index order.
pub(crate) fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if enabled() {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}
