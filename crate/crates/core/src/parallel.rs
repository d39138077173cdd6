//! Data-parallel map with a sequential fallback.
//!
//! `map_indexed` fans independent work items out across threads when the
//! `parallel` feature is enabled and runs them in order otherwise. Results
//! are always returned in input order, and callers reduce them sequentially,
//! so both modes produce bit-identical output. `map_sequential` is always
//! available as the explicit baseline the benches compare against.

/// Apply `f` to `0..n`, returning results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Apply `f` to `0..n`, returning results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    map_sequential(n, f)
}

/// Sequential reference implementation of [`map_indexed`].
pub fn map_sequential<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let p = map_indexed(100, |i| i * i);
        let s = map_sequential(100, |i| i * i);
        assert_eq!(p, s);
    }
}
