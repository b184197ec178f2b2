//! Ordered parallel map over episode indices.

use rayon::prelude::*;

use crate::{EmaiError, Result};

/// Evaluates `f(0..n)` on a pool of `workers` threads and returns the results
/// in index order. `workers <= 1` runs inline on the calling thread.
pub fn map_indexed<T, F>(workers: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| EmaiError::invalid(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}
