//! Deterministic data-parallel execution over batch samples.
//!
//! Work is split into fixed-size chunks and per-chunk results are combined
//! in chunk-index order, so floating-point reduction order is identical
//! whether chunks run on one thread or many. `Sequential` is the reference
//! mode; `Rayon` distributes chunks over the rayon pool when the `parallel`
//! feature is enabled and silently degrades to sequential otherwise.

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Fixed chunk width for batch decomposition. Results must not depend on
/// thread count, so this is a constant rather than a pool-derived value.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Parallelism {
    /// Single-threaded reference mode.
    Sequential,
    /// Chunked rayon execution; bit-identical to `Sequential`.
    #[default]
    Rayon,
}

/// Applies `f` to fixed-size chunks of `0..n` and returns per-chunk results
/// in chunk order. `f` receives the index range of its chunk.
pub fn map_chunks<R, F>(n: usize, mode: Parallelism, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> R + Sync + Send,
{
    let ranges: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(CHUNK.max(1))
        .map(|s| s..(s + CHUNK).min(n))
        .collect();
    match mode {
        Parallelism::Sequential => ranges.into_iter().map(f).collect(),
        Parallelism::Rayon => {
            #[cfg(feature = "parallel")]
            {
                ranges.into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                ranges.into_iter().map(f).collect()
            }
        }
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map_items<T, R, F>(items: &[T], mode: Parallelism, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode {
        Parallelism::Sequential => items.iter().map(f).collect(),
        Parallelism::Rayon => {
            #[cfg(feature = "parallel")]
            {
                items.par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.iter().map(f).collect()
            }
        }
    }
}
