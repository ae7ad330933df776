//! Index-ordered data parallelism. With the `parallel` feature the work is
//! spread over the rayon pool; without it the same closures run in a plain
//! loop. Results always come back in index order, so reductions over them are
//! deterministic either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Like [`map_indexed`] but stops at the first error (by index).
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

/// Caps the worker pool. A no-op in sequential builds or when a pool already exists.
pub fn set_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global() {
            log::debug!("thread pool already initialised: {e}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
