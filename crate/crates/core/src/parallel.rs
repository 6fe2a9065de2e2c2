//! Row-parallel dispatch. With the `parallel` feature, independent output rows
//! are spread over the rayon pool; without it (or after
//! [`set_parallel(false)`](set_parallel)) the same closures run sequentially.
//! Each row is always computed by one thread in a fixed order, so results are
//! bit-identical either way.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Work (in multiply-accumulates) below which a kernel stays sequential.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Enables or disables parallel kernels at runtime. Has no effect when the
/// crate is built without the `parallel` feature.
pub fn set_parallel(on: bool) {
    ENABLED.store(on && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    ENABLED.load(Ordering::Relaxed)
}

/// Calls `f(row_index, row)` for every `row_len`-sized chunk of `out`.
/// `work` is the approximate total cost, used to skip threading for tiny jobs.
pub fn for_each_row<T, F>(out: &mut [T], row_len: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && work >= MIN_PARALLEL_WORK && out.len() > row_len {
            use rayon::prelude::*;
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work;
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Maps `f` over `0..n` and collects, in parallel when enabled.
pub fn map_collect<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_visit_every_chunk_in_order() {
        let mut out = vec![0usize; 12];
        for_each_row(&mut out, 3, usize::MAX, |i, row| row.fill(i));
        assert_eq!(out, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn map_collect_preserves_order() {
        let v = map_collect(50, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 50);
    }
}
