//! Data-parallel helpers. With the `parallel` feature the work is spread over
//! the rayon pool; without it everything runs on the calling thread. Results
//! always come back in input order.

/// Whether [`map_indexed`] runs on the rayon pool.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

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
    F: Fn(usize) -> U,
{
    map_indexed_sequential(count, f)
}

/// Always-sequential variant, kept available for benchmarking.
pub fn map_indexed_sequential<U, F>(count: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..count).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let squares = map_indexed(100, |i| i * i);
        assert_eq!(squares, map_indexed_sequential(100, |i| i * i));
        assert_eq!(squares[7], 49);
    }
}
