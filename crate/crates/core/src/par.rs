//! Data-parallel helpers.
//!
//! With the `parallel` feature the chunked loops below fan out over the rayon
//! pool; without it (or after [`set_enabled(false)`](set_enabled)) they run on
//! the calling thread. Work is only ever split over disjoint output chunks, so
//! results are bit-identical in both modes.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Below this many output elements a loop is not worth splitting.
pub const MIN_PARALLEL_LEN: usize = 1 << 14;

/// Runtime switch, useful for benchmarking both paths from one binary.
/// Has no effect when the crate is built without `parallel`.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

/// True when loops may fan out: the feature is on, the switch is set and the
/// pool has more than one thread.
pub fn enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        ENABLED.load(Ordering::Relaxed) && rayon::current_num_threads() > 1
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Calls `f(chunk_index, chunk)` for each `chunk`-sized piece of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        if enabled() && data.len() >= MIN_PARALLEL_LEN && data.len() > chunk {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Elementwise map into `out`.
pub fn map_into<T, U, F>(src: &[T], out: &mut [U], f: F)
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    assert_eq!(src.len(), out.len());
    const CHUNK: usize = 4096;
    for_each_chunk(out, CHUNK, |ci, o| {
        let base = ci * CHUNK;
        let end = base + o.len();
        for (dst, s) in o.iter_mut().zip(&src[base..end]) {
            *dst = f(s);
        }
    });
}

/// Elementwise binary map into `out`.
pub fn zip_into<A, B, U, F>(a: &[A], b: &[B], out: &mut [U], f: F)
where
    A: Sync,
    B: Sync,
    U: Send,
    F: Fn(&A, &B) -> U + Sync + Send,
{
    assert_eq!(a.len(), out.len());
    assert_eq!(b.len(), out.len());
    const CHUNK: usize = 4096;
    for_each_chunk(out, CHUNK, |ci, o| {
        let base = ci * CHUNK;
        let end = base + o.len();
        for ((dst, x), y) in o.iter_mut().zip(&a[base..end]).zip(&b[base..end]) {
            *dst = f(x, y);
        }
    });
}
