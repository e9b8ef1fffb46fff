//! Data parallelism over independent examples.
//!
//! Batch gradients, per-example evaluation and dataset synthesis all map an
//! independent function over a slice. With the `parallel` feature (default)
//! the map runs on rayon; without it the exact same code runs sequentially.
//! Results are collected in input order and reduced sequentially, so outputs
//! are bit-identical regardless of thread count or feature selection.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, in parallel when the `parallel` feature is enabled.
/// Output order always matches input order.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential reference version of [`map`], always available so benchmarks
/// can compare both paths within one build.
pub fn map_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Pin the worker-thread count for all parallel maps. Call once, before any
/// parallel work; later calls (or calls without the `parallel` feature) have
/// no effect. Thread count never changes results, only wall time.
pub fn configure_workers(_n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(_n)
            .build_global();
    }
}

/// Map `f` over indices `0..n`; parallel under the `parallel` feature.
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_matches_sequential_order() {
        let items: Vec<u64> = (0..257).collect();
        let f = |x: &u64| x.wrapping_mul(0x9e3779b97f4a7c15);
        assert_eq!(map(&items, f), map_seq(&items, f));
    }

    #[test]
    fn map_indices_ordered() {
        assert_eq!(map_indices(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
