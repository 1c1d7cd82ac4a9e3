//! Kernel execution strategy.
//!
//! Every kernel is written so that each output element (or output row) is
//! computed independently by the same scalar code in both modes; results are
//! therefore bitwise identical whether a kernel runs on the rayon pool or on
//! the calling thread. Cross-element reductions always run sequentially.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Parallel,
    Sequential,
}

static MODE: AtomicU8 = AtomicU8::new(0);

/// Work sizes below this run sequentially even in parallel mode; splitting
/// tiny loops across the pool costs more than it saves.
pub const PAR_THRESHOLD: usize = 1 << 12;

pub fn set_mode(mode: Mode) {
    MODE.store(mode as u8, Ordering::Relaxed);
}

pub fn mode() -> Mode {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == 0 {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Apply `f(row_index, row)` to every `row_len` chunk of `out`.
pub fn for_each_row<E, F>(out: &mut [E], row_len: usize, f: F)
where
    E: Send,
    F: Fn(usize, &mut [E]) + Send + Sync,
{
    debug_assert!(row_len > 0 && out.len() % row_len == 0);
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel && out.len() >= PAR_THRESHOLD {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Apply `f(index, element)` to every element of `out`.
pub fn for_each_elem<E, F>(out: &mut [E], f: F)
where
    E: Send,
    F: Fn(usize, &mut E) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel && out.len() >= PAR_THRESHOLD {
        use rayon::prelude::*;
        out.par_iter_mut().enumerate().for_each(|(i, e)| f(i, e));
        return;
    }
    for (i, e) in out.iter_mut().enumerate() {
        f(i, e);
    }
}
