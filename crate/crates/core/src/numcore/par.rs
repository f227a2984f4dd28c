//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) large jobs are spread over the
//! rayon pool; otherwise, or when the job is small, the same closure runs
//! on the calling thread. Every helper writes each output element from
//! exactly one closure invocation, so results are bit-identical whichever
//! path runs.

/// Below this many scalar operations the rayon dispatch costs more than it saves.
pub const PAR_MIN_WORK: usize = 1 << 15;

/// Calls `f(index, chunk)` for each consecutive `chunk_len` slice of `out`.
pub fn for_each_chunk_mut<F>(out: &mut [f64], chunk_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if work >= PAR_MIN_WORK && out.len() > chunk_len {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = work;
    out.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// `(0..n).map(f).collect()`, in parallel when the feature is on and `work` is large.
pub fn map_range<T, F>(n: usize, work: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if work >= PAR_MIN_WORK && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = work;
    (0..n).map(f).collect()
}

/// Runs `f` with every helper confined to one worker thread.
pub fn single_worker<R, F>(f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(1).build() {
        return pool.install(f);
    }
    f()
}

/// Whether this build dispatches to rayon at all.
pub const fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}
