//! Data-parallel helpers.
//!
//! Every helper splits work by output element, so each output is written by
//! exactly one task with a fixed accumulation order. Parallel and sequential
//! builds therefore produce bit-identical results.

/// Work items below this size always run on the calling thread.
pub const PAR_THRESHOLD: usize = 1 << 15;

use std::cell::Cell;

thread_local! {
    static SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// True when the crate was built with the `parallel` feature.
pub const fn enabled() -> bool {
    cfg!(feature = "parallel")
}

/// True when kernels called from this thread may fan out over rayon.
pub fn active() -> bool {
    enabled() && !SEQUENTIAL.with(Cell::get)
}

/// Run `f` with every kernel called from this thread on the sequential
/// path, as if the crate were built without `parallel`.
pub fn sequential<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            SEQUENTIAL.with(|s| s.set(self.0));
        }
    }
    let _restore = Restore(SEQUENTIAL.with(|s| s.replace(true)));
    f()
}

/// Fill `out` chunk by chunk. `f` receives the chunk index and the chunk.
pub fn for_each_chunk_mut<F>(out: &mut [f32], chunk: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Send + Sync,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        if active() && work >= PAR_THRESHOLD && out.len() > chunk {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = work;
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Elementwise map into a fresh buffer.
pub fn map<F>(src: &[f32], f: F) -> Vec<f32>
where
    F: Fn(f32) -> f32 + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if active() && src.len() >= PAR_THRESHOLD {
            use rayon::prelude::*;
            return src.par_iter().with_min_len(4096).map(|&v| f(v)).collect();
        }
    }
    src.iter().map(|&v| f(v)).collect()
}

/// Elementwise zip of two equally sized buffers.
pub fn zip<F>(a: &[f32], b: &[f32], f: F) -> Vec<f32>
where
    F: Fn(f32, f32) -> f32 + Send + Sync,
{
    assert_eq!(a.len(), b.len(), "zip: length mismatch");
    #[cfg(feature = "parallel")]
    {
        if active() && a.len() >= PAR_THRESHOLD {
            use rayon::prelude::*;
            return a.par_iter().zip(b).with_min_len(4096).map(|(&x, &y)| f(x, y)).collect();
        }
    }
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Map `f` over `0..n`, collecting results in order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if active() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}
