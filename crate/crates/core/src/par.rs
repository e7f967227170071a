//! Data-parallel map helpers.
//!
//! With the `parallel` feature (default) these fan out over rayon; without
//! it they run sequentially. Outputs are always collected in index order,
//! and callers do their final reductions sequentially, so results are
//! bit-identical under either build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
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

/// Cap the worker pool at `n` threads (used by the CLI's FG_THREADS).
/// Must be called before any parallel work; later calls are ignored.
/// Without the `parallel` feature this is a no-op.
pub fn limit_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
    }
}

/// Always-sequential variant, kept for benchmark comparison.
pub fn map_range_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}
