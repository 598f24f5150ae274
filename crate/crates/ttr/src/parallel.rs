//! Data-parallel fan-out with a sequential fallback.
//!
//! With the `parallel` feature (default) enabled, [`map_indexed`] runs on a
//! rayon pool sized by the caller; without it the crate compiles with no
//! rayon dependency and every fan-out runs sequentially. Results are
//! position-stable either way, and each job derives its own randomness from
//! its index, so output never depends on the degree of parallelism.

/// Map `f` over `0..n`, producing results in index order.
///
/// `parallelism` 0 means "use all available threads"; 1 forces the
/// sequential path even when the feature is enabled.
pub fn map_indexed<R, F>(n: usize, parallelism: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if parallelism != 1 {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(parallelism)
                .build()
                .expect("failed to build thread pool");
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
    }
    let _ = parallelism;
    (0..n).map(f).collect()
}

/// Map `f` over the items of a slice in parallel, preserving order.
pub fn map_slice<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    map_indexed(items.len(), parallelism, |i| f(&items[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_stable_across_parallelism() {
        let seq = map_indexed(100, 1, |i| i * i);
        let par = map_indexed(100, 8, |i| i * i);
        assert_eq!(seq, par);
    }

    #[test]
    fn slice_map_matches() {
        let xs = vec![3u64, 1, 4, 1, 5];
        assert_eq!(map_slice(&xs, 4, |x| x + 1), vec![4, 2, 5, 2, 6]);
    }
}
