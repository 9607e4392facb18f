//! Data-parallel map helpers.
//!
//! Heavy inner loops (batch gradients, candidate rollouts, CEM populations,
//! per-sample evaluation) are embarrassingly parallel over frozen, read-only
//! state. `par_map` dispatches to rayon when the `parallel` feature is on and
//! to `seq_map` otherwise. Both collect results in input order, so the output
//! is identical either way; the bench suite compares the two paths.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Sequential reference path; always available.
pub fn seq_map<T: Sync, R: Send, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R + Sync,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn par_map<T: Sync, R: Send, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T: Sync, R: Send, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R + Sync + Send,
{
    seq_map(items, f)
}

/// Map over fixed-size chunks of an index range, in parallel, collecting
/// chunk results in chunk order. Chunk size is a constant independent of
/// thread count so reductions stay deterministic.
pub fn par_chunk_map<R: Send, F>(n: usize, chunk: usize, f: F) -> Vec<R>
where
    F: Fn(std::ops::Range<usize>) -> R + Sync + Send,
{
    assert!(chunk > 0);
    let ranges: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(chunk)
        .map(|s| s..(s + chunk).min(n))
        .collect();
    par_map(&ranges, |r| f(r.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_matches_seq() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = seq_map(&xs, |x| x * x + 1);
        let b = par_map(&xs, |x| x * x + 1);
        assert_eq!(a, b);
    }

    #[test]
    fn chunk_map_covers_range_in_order() {
        let parts = par_chunk_map(10, 3, |r| r.collect::<Vec<_>>());
        let flat: Vec<usize> = parts.into_iter().flatten().collect();
        assert_eq!(flat, (0..10).collect::<Vec<_>>());
    }
}
