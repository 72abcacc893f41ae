//! Data-parallel fan-out with a sequential fallback.
//!
//! Everything embarrassingly parallel in this crate (replications, drift
//! certificate batches, Monte Carlo oracles) goes through [`map_indexed`].
//! With the `parallel` feature (default) it uses the rayon global pool;
//! without it the same closure runs on one thread. Results are collected in
//! index order either way, so outputs are identical.

/// Applies `f` to `0..count`, in parallel when built with the `parallel`
/// feature, returning results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<U, F>(count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..count).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U, F>(count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    map_indexed_seq(count, f)
}

/// Sequential version of [`map_indexed`], always available. Exists so the
/// bench suite can compare both paths inside one binary.
pub fn map_indexed_seq<U, F>(count: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..count).map(f).collect()
}
