//! Data-parallel building blocks with a sequential fallback.
//!
//! With the `parallel` feature (the default) the heavy inner loops fan out
//! over rayon; without it the same helpers run plain loops. Reductions are
//! chunked with a fixed chunk size and the per-chunk partials are folded in
//! chunk order, so results are bit-identical regardless of thread count,
//! scheduling, or whether the feature is enabled at all.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work sizes below this (in rough scalar-op units) stay sequential; the
/// fork/join overhead dominates otherwise.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Fixed chunk length for deterministic reductions.
pub const REDUCE_CHUNK: usize = 256;

/// Fill `out` row by row. Rows are independent, so the result does not
/// depend on scheduling. `work_per_row` is an estimate used to decide
/// whether parallelism is worth it.
pub fn fill_rows(
    out: &mut [f64],
    cols: usize,
    work_per_row: usize,
    f: impl Fn(usize, &mut [f64]) + Sync + Send,
) {
    debug_assert_eq!(out.len() % cols.max(1), 0);
    #[cfg(feature = "parallel")]
    {
        let rows = out.len() / cols.max(1);
        if rows * work_per_row >= MIN_PARALLEL_WORK && rows > 1 {
            out.par_chunks_mut(cols)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work_per_row;
    for (i, row) in out.chunks_mut(cols).enumerate() {
        f(i, row);
    }
}

/// Deterministic chunked sum: `f(start, end)` returns the exact sequential
/// partial sum over `start..end`; partials are folded in chunk order.
pub fn chunked_sum(
    n: usize,
    work_per_item: usize,
    f: impl Fn(usize, usize) -> f64 + Sync + Send,
) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n_chunks = n.div_ceil(REDUCE_CHUNK);
    let partial = |ci: usize| {
        let start = ci * REDUCE_CHUNK;
        let end = (start + REDUCE_CHUNK).min(n);
        f(start, end)
    };
    #[cfg(feature = "parallel")]
    {
        if n * work_per_item >= MIN_PARALLEL_WORK && n_chunks > 1 {
            let partials: Vec<f64> = (0..n_chunks).into_par_iter().map(partial).collect();
            return partials.iter().sum();
        }
    }
    let _ = work_per_item;
    let mut acc = 0.0;
    for ci in 0..n_chunks {
        acc += partial(ci);
    }
    acc
}

/// Independent map over `0..n`, collected in index order.
pub fn indexed_map<U: Send>(
    n: usize,
    work_per_item: usize,
    f: impl Fn(usize) -> U + Sync + Send,
) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        if n * work_per_item >= MIN_PARALLEL_WORK && n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = work_per_item;
    (0..n).map(f).collect()
}

/// Run `f` on a single-threaded pool. Used by the benches to compare the
/// parallel code path against serial execution within one build; without the
/// `parallel` feature this is a plain call.
pub fn run_sequential<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        use std::sync::OnceLock;
        static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
        let pool = POOL.get_or_init(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .expect("single-thread pool")
        });
        pool.install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}
