use rayon::prelude::*;

/// Minimum number of nodes handed to one rayon task.
const MIN_CHUNK: usize = 256;

/// Maps `f` over `0..len` in parallel. Output order is the index order and
/// the reported error is the one at the lowest index, so the result does not
/// depend on the number of worker threads.
pub(crate) fn map_indexed<T, E, F>(len: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    let results: Vec<Result<T, E>> = (0..len).into_par_iter().with_min_len(MIN_CHUNK).map(f).collect();
    results.into_iter().collect()
}
