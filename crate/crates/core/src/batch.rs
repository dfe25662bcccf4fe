//! Batch evaluation helpers.
//!
//! All Monte Carlo and per-state sweeps in this crate funnel through
//! `map_indexed`, which evaluates a pure function on `0..n` and collects
//! results in index order. With the `parallel` feature (default) the body
//! runs on the rayon pool; without it the loop is sequential. Because
//! outputs are ordered and per-item randomness is counter-keyed, the two
//! paths produce identical bytes.
//!
//! Reductions over batch output must stay sequential (floating-point sums
//! are order-sensitive); reduce the collected `Vec` instead of folding
//! inside the parallel iterator.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Evaluate `f` on every index in `0..n`, collecting results in order.
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

/// Sequential reference path, kept unconditionally for benchmarks.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_output() {
        let out = map_indexed(100, |i| i * i);
        let reference = map_indexed_seq(100, |i| i * i);
        assert_eq!(out, reference);
    }
}
