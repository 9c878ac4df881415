//! Data-parallel map helpers.
//!
//! With the `parallel` feature (the default) these fan out over the global
//! rayon pool; without it the same API runs sequentially. Both variants
//! collect results in input order, so downstream reductions see identical
//! operand sequences and outputs are byte-identical regardless of thread
//! count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::Result;

/// Map `f` over `0..n`, in parallel when the `parallel` feature is enabled.
pub fn indexed_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Fallible variant of [`indexed_map`]; the first error wins.
pub fn try_indexed_map<R, F>(n: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync + Send,
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

/// Always-sequential map over `0..n`, kept for benchmarking the parallel
/// path against one-thread execution of the same closure.
pub fn indexed_map_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

/// Cap the global worker pool at `n` threads. Returns false if the pool was
/// already initialized (rayon allows configuring it only once).
#[cfg(feature = "parallel")]
pub fn configure_thread_cap(n: usize) -> bool {
    rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().is_ok()
}

/// Without the `parallel` feature every map is sequential; the cap is a no-op.
#[cfg(not(feature = "parallel"))]
pub fn configure_thread_cap(_n: usize) -> bool {
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_preserve_input_order() {
        let squares = indexed_map(100, |i| i * i);
        let squares_seq = indexed_map_seq(100, |i| i * i);
        assert_eq!(squares, squares_seq);
    }

    #[test]
    fn try_map_propagates_errors() {
        let out = try_indexed_map(10, |i| {
            if i == 7 {
                Err(crate::Error::domain("seven"))
            } else {
                Ok(i)
            }
        });
        assert!(out.is_err());
    }
}
