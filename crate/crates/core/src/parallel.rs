//! Chunked map-reduce used by every batch loop in the crate.
//!
//! Work is split into fixed-size chunks whose boundaries do not depend on the
//! thread count, and partial results are combined in chunk order. With the
//! `parallel` feature the map runs on the rayon pool; without it the same
//! chunks are visited sequentially, so both paths give identical bits.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for a map over chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// `Parallel` degrades to `Sequential` when the feature is compiled out.
    pub fn effective(self) -> Exec {
        if cfg!(feature = "parallel") {
            self
        } else {
            Exec::Sequential
        }
    }
}

/// Map `f` over `0..n_chunks` and return the results in chunk order.
pub fn map_chunks<R, F>(exec: Exec, n_chunks: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec.effective() {
        Exec::Sequential => (0..n_chunks).map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n_chunks).into_par_iter().map(f).collect(),
        #[cfg(not(feature = "parallel"))]
        Exec::Parallel => unreachable!(),
    }
}

/// Map over the ranges `[k*chunk, min((k+1)*chunk, len))`.
pub fn map_ranges<R, F>(exec: Exec, len: usize, chunk: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    let n = len.div_ceil(chunk);
    map_chunks(exec, n, |k| f(k * chunk..((k + 1) * chunk).min(len)))
}

/// Configure the global rayon pool. A no-op without the `parallel` feature.
pub fn set_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}
