//! Data-parallel helpers with a sequential fallback.
//!
//! Every reduction is split into fixed-size chunks whose partial results are
//! combined left to right, so results are bit-identical whatever the thread
//! count and whether or not the `parallel` feature is enabled.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length for reductions.
pub const CHUNK: usize = 2048;

/// `(0..n).map(f).collect()`, evaluated in parallel when available.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

/// Deterministic sum of `f(0) + ... + f(n-1)`.
pub fn sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK);
    let partial = map_collect(chunks, |c| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(n);
        (lo..hi).map(&f).sum::<f64>()
    });
    partial.into_iter().sum()
}

/// Deterministic maximum of `f(i)`; `None` values are skipped.
pub fn max<F>(n: usize, f: F) -> Option<f64>
where
    F: Fn(usize) -> Option<f64> + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK);
    let partial = map_collect(chunks, |c| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(n);
        (lo..hi).filter_map(&f).fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.max(v)))
        })
    });
    partial
        .into_iter()
        .flatten()
        .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
}

/// Fills `out` in place; `f(start, block)` receives blocks of `block_len` entries.
pub fn fill_blocks<F>(out: &mut [f64], block_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let block_len = block_len.max(1);
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(block_len)
            .enumerate()
            .for_each(|(b, blk)| f(b * block_len, blk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(block_len)
            .enumerate()
            .for_each(|(b, blk)| f(b * block_len, blk));
    }
}

/// Runs `op` on a pool limited to `threads` workers (0 = library default).
pub fn with_threads<R: Send>(threads: usize, op: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            return op();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(op),
            Err(e) => {
                log::warn!("could not build a {threads}-thread pool ({e}); using the global pool");
                op()
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        op()
    }
}
