//! Execution policy for the data-parallel kernels.
//!
//! With the `parallel` feature the kernels split independent output blocks
//! across the rayon pool. Every output element is still reduced in a fixed
//! sequential order, so parallel and sequential runs are bitwise identical.
//! Without the feature (or after `set_parallel(false)`) the same closures run
//! on the calling thread.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Enables or disables the rayon path at runtime. A no-op without the
/// `parallel` feature.
pub fn set_parallel(on: bool) {
    PARALLEL.store(on && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Runs `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
