//! Data-parallel execution helpers.
//!
//! Every parallel section in the crate goes through [`map_indices`], which is
//! an ordered map-collect. Floating-point reductions are always performed
//! sequentially afterwards so results are bit-identical regardless of the
//! number of worker threads or of the execution mode.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Execution mode used by the data-parallel kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

/// Selects the execution mode for subsequent calls. Without the `parallel`
/// feature the mode is ignored and everything runs on the calling thread.
pub fn set_mode(mode: Mode) {
    FORCE_SEQUENTIAL.store(mode == Mode::Sequential, Ordering::Relaxed);
}

pub fn mode() -> Mode {
    if cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed) {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Ordered `(0..n).map(f).collect()`, parallel when enabled.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if mode() == Mode::Parallel && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Ordered map over a slice, parallel when enabled.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    map_indices(items.len(), |i| f(&items[i]))
}
