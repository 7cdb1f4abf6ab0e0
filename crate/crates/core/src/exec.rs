//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (default) indexed maps run on the rayon pool;
//! without it, or when the mode is switched to [`Mode::Sequential`], the same
//! closures run in a plain loop. Results are always collected in index order
//! and every reduction downstream is performed sequentially over that vector,
//! so both modes produce bit-identical output.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

const UNSET: u8 = 0;
const SEQ: u8 = 1;
const PAR: u8 = 2;

static MODE: AtomicU8 = AtomicU8::new(UNSET);

/// Process-wide execution mode. Parallel is ignored when the crate is built
/// without the `parallel` feature.
pub fn set_mode(mode: Mode) {
    let v = match mode {
        Mode::Sequential => SEQ,
        Mode::Parallel => PAR,
    };
    MODE.store(v, Ordering::Relaxed);
}

pub fn mode() -> Mode {
    match MODE.load(Ordering::Relaxed) {
        SEQ => Mode::Sequential,
        PAR if cfg!(feature = "parallel") => Mode::Parallel,
        UNSET if cfg!(feature = "parallel") => Mode::Parallel,
        _ => Mode::Sequential,
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
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

/// Maps over a slice, possibly in parallel.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    map_indexed(items.len(), |i| f(&items[i]))
}

/// Mutates every element, possibly in parallel.
pub fn for_each_mut<S, F>(items: &mut [S], f: F)
where
    S: Send,
    F: Fn(usize, &mut S) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if mode() == Mode::Parallel && items.len() > 1 {
            use rayon::prelude::*;
            items.par_iter_mut().enumerate().for_each(|(i, s)| f(i, s));
            return;
        }
    }
    items.iter_mut().enumerate().for_each(|(i, s)| f(i, s));
}
