//! Data-parallel map with a sequential fallback.
//!
//! Bootstrap replicates, grid points, Lepski candidates, and Monte Carlo
//! replications are all independent index-keyed tasks. `par_map_indexed`
//! evaluates them with rayon when the `parallel` feature is enabled and
//! sequentially otherwise, always collecting results in index order so
//! downstream reductions (and therefore all outputs) are identical under
//! either backend and any thread count. Floating-point reductions are never
//! parallelized.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to 0..len, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn par_map_indexed<U, F>(len: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..len).into_par_iter().map(f).collect()
}

/// Apply `f` to 0..len, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn par_map_indexed<U, F>(len: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..len).map(f).collect()
}

/// Configure the global worker pool size. Returns false if the pool was
/// already initialized (the request is then ignored). A no-op without the
/// `parallel` feature.
#[cfg(feature = "parallel")]
pub fn configure_threads(threads: usize) -> bool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .is_ok()
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_threads: usize) -> bool {
    false
}
