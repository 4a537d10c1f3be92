//! Thin switch between rayon and sequential iteration.
//!
//! Every parallel loop in the crate maps independent work items and collects
//! the results in index order; reductions happen afterwards, sequentially, so
//! results are bitwise identical with and without the `parallel` feature.

/// Map `f` over `0..len` and collect in order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..len).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..len).map(f).collect()
}

/// Fill consecutive chunks of `out` in parallel; `f` receives the chunk and
/// the index of its first element.
#[cfg(feature = "parallel")]
pub fn fill_chunks<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    use rayon::prelude::*;
    out.par_chunks_mut(chunk.max(1))
        .enumerate()
        .for_each(|(c, slice)| f(c * chunk.max(1), slice));
}

#[cfg(not(feature = "parallel"))]
pub fn fill_chunks<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    for (c, slice) in out.chunks_mut(chunk.max(1)).enumerate() {
        f(c * chunk.max(1), slice);
    }
}

/// Number of worker threads the parallel loops will use.
pub fn current_num_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
