//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature these dispatch to rayon; without it they run
//! the same closures in index order. Callers must not depend on evaluation
//! order, and every reduction here is over a total order so results are
//! identical across thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows below this length are not worth splitting across threads.
#[cfg(feature = "parallel")]
const MIN_PAR_LEN: usize = 1 << 9;

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().with_min_len(64).map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Calls `f(i, &mut items[i])` for every element.
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items
            .par_iter_mut()
            .with_min_len(MIN_PAR_LEN)
            .enumerate()
            .for_each(|(i, x)| f(i, x));
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter_mut().enumerate().for_each(|(i, x)| f(i, x));
    }
}

/// Calls `f(i, row_i)` for every `stride`-wide row of `data`.
pub fn for_each_row<F>(data: &mut [f64], stride: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if stride == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(stride)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(stride).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// Visits `(i, row_i, &mut scalar_i)` where `row_i` is the i-th `stride`-wide
/// chunk of `rows`, and returns the lexicographic maximum of the produced
/// keys `(value, Reverse(i))`, i.e. the largest value with lowest index on ties.
///
/// `f` returns `None` for items that should not compete in the argmax.
pub fn update_rows_argmax<F>(
    rows: &mut [f64],
    stride: usize,
    scalars: &mut [f64],
    f: F,
) -> Option<(usize, f64)>
where
    F: Fn(usize, &mut [f64], &mut f64) -> Option<f64> + Sync + Send,
{
    debug_assert_eq!(rows.len(), stride * scalars.len());
    let pick = |a: Option<(usize, f64)>, b: Option<(usize, f64)>| match (a, b) {
        (None, x) | (x, None) => x,
        (Some(a), Some(b)) => Some(if better(b, a) { b } else { a }),
    };

    #[cfg(feature = "parallel")]
    {
        // A zero stride (nothing selected yet) still needs one slot per item.
        if stride == 0 {
            return scalars
                .par_iter_mut()
                .with_min_len(MIN_PAR_LEN)
                .enumerate()
                .map(|(i, s)| f(i, &mut [], s).map(|v| (i, v)))
                .reduce(|| None, pick);
        }
        rows.par_chunks_mut(stride)
            .zip(scalars.par_iter_mut())
            .with_min_len(MIN_PAR_LEN)
            .enumerate()
            .map(|(i, (row, s))| f(i, row, s).map(|v| (i, v)))
            .reduce(|| None, pick)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut best = None;
        for (i, s) in scalars.iter_mut().enumerate() {
            let row = &mut rows[i * stride..(i + 1) * stride];
            best = pick(best, f(i, row, s).map(|v| (i, v)));
        }
        best
    }
}

/// True when `a` beats `b`: larger value, or equal value and lower index.
/// NaN never wins.
#[inline]
pub fn better(a: (usize, f64), b: (usize, f64)) -> bool {
    a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
}

/// Index of the largest value, lowest index on ties. NaNs are skipped.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some(b) if !better((i, v), b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Number of worker threads the data-parallel paths will use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Runs `f` on a dedicated pool of `threads` workers. Without the
/// `parallel` feature this simply calls `f`.
pub fn with_threads<R, F>(threads: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .expect("thread pool")
            .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

/// Configures the global worker pool. A no-op without the `parallel` feature.
/// Fails silently if the pool was already initialised.
pub fn init_threads(threads: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads.filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}
