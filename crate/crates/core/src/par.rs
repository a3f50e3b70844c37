//! Row-parallel execution helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it they are
//! plain sequential loops. Work is split by output row only, so the arithmetic
//! performed for any single element is the same in both modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Calls `f(i, row)` for every `cols`-wide row of `data`.
pub fn for_each_row_mut<T, F>(data: &mut [T], cols: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if cols == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
}

/// Evaluates `f` on `0..n`, returning results in index order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
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

/// Number of worker threads row-parallel loops will use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Runs `f` with every row-parallel loop inside it confined to one thread.
pub fn run_sequential<R, F>(f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(1).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_visited_in_place() {
        let mut data = vec![0usize; 12];
        for_each_row_mut(&mut data, 3, |i, row| row.iter_mut().for_each(|v| *v = i));
        assert_eq!(data, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn map_keeps_order() {
        assert_eq!(map_indices(5, |i| i * i), vec![0, 1, 4, 9, 16]);
        assert_eq!(run_sequential(threads), 1);
    }
}
