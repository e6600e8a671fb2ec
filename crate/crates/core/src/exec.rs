//! Execution backend for the data-parallel loops (paths, claims, controls).
//!
//! With the `parallel` feature the loops run on rayon; without it, or when
//! [`set_mode`] selects [`Mode::Sequential`], they run on the calling
//! thread. Results are always assembled in index order and reductions are
//! done sequentially over fixed-size chunks, so both modes produce
//! bitwise-identical output.

use std::sync::atomic::{AtomicU8, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Paths per reduction chunk. Fixed so that reductions do not depend on the
/// thread count.
pub const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(if cfg!(feature = "parallel") { 1 } else { 0 });

pub fn set_mode(mode: Mode) {
    let v = match mode {
        Mode::Sequential => 0,
        Mode::Parallel if cfg!(feature = "parallel") => 1,
        Mode::Parallel => {
            log::warn!("built without the `parallel` feature; staying sequential");
            0
        }
    };
    MODE.store(v, Ordering::Relaxed);
}

pub fn mode() -> Mode {
    if MODE.load(Ordering::Relaxed) == 1 {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Configures the global rayon pool. A no-op in sequential builds.
pub fn init_threads(threads: usize) -> crate::Result<()> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| crate::Error::Config(format!("thread pool: {e}")))?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

/// `(0..n).map(f).collect()`, possibly in parallel, order preserved.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Fallible variant of [`map_range`]; the first error in index order wins.
pub fn try_map_range<T, F>(n: usize, f: F) -> crate::Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> crate::Result<T> + Sync + Send,
{
    map_range(n, f).into_iter().collect()
}

/// Mutates every element of `data` in place, possibly in parallel.
pub fn for_each_mut<T, F>(data: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => data.par_iter_mut().enumerate().for_each(|(i, x)| f(i, x)),
        _ => data.iter_mut().enumerate().for_each(|(i, x)| f(i, x)),
    }
}

/// Folds `n` items in chunks of [`CHUNK`] and merges the chunk accumulators
/// left to right. Deterministic regardless of mode.
pub fn chunked_fold<A, I, F, M>(n: usize, init: I, fold: F, merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, usize) + Sync + Send,
    M: Fn(&mut A, A),
{
    let chunks = n.div_ceil(CHUNK);
    let parts = map_range(chunks, |c| {
        let mut acc = init();
        let lo = c * CHUNK;
        let hi = ((c + 1) * CHUNK).min(n);
        for i in lo..hi {
            fold(&mut acc, i);
        }
        acc
    });
    let mut total = init();
    for p in parts {
        merge(&mut total, p);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_fold_matches_plain_sum() {
        let n = 3 * CHUNK + 17;
        let s = chunked_fold(n, || 0u64, |a, i| *a += i as u64, |a, b| *a += b);
        assert_eq!(s, (n as u64 - 1) * n as u64 / 2);
    }

    #[test]
    fn map_range_keeps_order() {
        let v = map_range(1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }
}
