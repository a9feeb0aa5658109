//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it, or
//! while [`sequential`] mode is switched on, they run on the calling thread.
//! Every helper preserves input order, so results are bitwise identical in
//! both modes.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Forces every helper in this module onto the calling thread.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_sequential() -> bool {
    !cfg!(feature = "parallel") || FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Runs `f` with sequential mode on, restoring the previous mode afterwards.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = FORCE_SEQUENTIAL.swap(true, Ordering::SeqCst);
    let out = f();
    FORCE_SEQUENTIAL.store(prev, Ordering::SeqCst);
    out
}

/// Number of worker threads the parallel path would use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        if !is_sequential() {
            return rayon::current_num_threads();
        }
    }
    1
}

/// Order-preserving map over `0..n`.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !is_sequential() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Order-preserving map over a slice.
pub fn map<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    map_range(items.len(), |i| f(&items[i]))
}

/// Applies `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of
/// `data`. Work below `min_work` elements stays on the calling thread.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, min_work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        if !is_sequential() && data.len() >= min_work && data.len() > chunk {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = min_work;
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}
