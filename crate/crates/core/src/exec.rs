//! Work partitioning for the coordinate dimension.
//!
//! Every kernel splits its rows into fixed-size chunks whether or not the
//! `parallel` feature is enabled, so results are bit-identical between the
//! two execution modes. With the feature on, chunks are handed to rayon.

use std::sync::atomic::{AtomicBool, Ordering};

/// Rows per work item.
pub const CHUNK_ROWS: usize = 2048;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Turns the rayon path off (or back on) at runtime. Without the `parallel`
/// feature this has no effect.
pub fn set_parallel(enabled: bool) {
    FORCE_SEQUENTIAL.store(!enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Calls `f(first_row, chunk)` for consecutive chunks of `row_len`-wide rows.
pub fn for_each_row_chunk<F>(out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 || out.is_empty() {
        return;
    }
    let chunk = CHUNK_ROWS * row_len;
    #[cfg(feature = "parallel")]
    if parallel_enabled() && out.len() > chunk {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i * CHUNK_ROWS, c));
        return;
    }
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i * CHUNK_ROWS, c);
    }
}

/// Evaluates `f(start, end)` over row ranges of `rows` and returns the
/// results in range order.
pub fn map_row_ranges<T, F>(rows: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, usize) -> T + Sync + Send,
{
    let n_chunks = rows.div_ceil(CHUNK_ROWS).max(1);
    let range = |i: usize| (i * CHUNK_ROWS, ((i + 1) * CHUNK_ROWS).min(rows));
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n_chunks > 1 {
        use rayon::prelude::*;
        return (0..n_chunks)
            .into_par_iter()
            .map(|i| {
                let (s, e) = range(i);
                f(s, e)
            })
            .collect();
    }
    (0..n_chunks)
        .map(|i| {
            let (s, e) = range(i);
            f(s, e)
        })
        .collect()
}

/// Maps independent jobs (trials, seeds) in order, fanning out when enabled.
pub fn map_jobs<I, T, F>(items: Vec<I>, f: F) -> Vec<T>
where
    I: Send,
    T: Send,
    F: Fn(I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && items.len() > 1 {
        use rayon::prelude::*;
        return items.into_par_iter().map(f).collect();
    }
    items.into_iter().map(f).collect()
}
