//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these fan out over the rayon pool;
//! without it they run the same closures sequentially. Results are always
//! returned in index order, so callers that reduce them sequentially get
//! bit-identical output regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of output elements before a kernel bothers to split work.
pub const MIN_PARALLEL_WORK: usize = 1 << 14;

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
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

/// Maps `f` over a slice, preserving order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
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

/// Calls `f(row_index, row)` for each `cols`-wide row of `data`.
///
/// Falls back to a plain loop when the buffer is small.
pub fn for_each_row_mut<F>(data: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if cols == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if data.len() >= MIN_PARALLEL_WORK {
            data.par_chunks_mut(cols)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    for (i, row) in data.chunks_mut(cols).enumerate() {
        f(i, row);
    }
}

/// Whether this build fans work out over threads.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        let out = map_range(1000, |i| i * 2);
        assert!(out.iter().enumerate().all(|(i, &v)| v == 2 * i));
    }

    #[test]
    fn rows_visit_every_index_once() {
        let mut data = vec![0.0; 3 * MIN_PARALLEL_WORK];
        for_each_row_mut(&mut data, 3, |i, row| {
            for v in row.iter_mut() {
                *v = i as f64;
            }
        });
        for (i, row) in data.chunks(3).enumerate() {
            assert!(row.iter().all(|&v| v == i as f64));
        }
    }
}
