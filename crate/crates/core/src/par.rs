//! Data-parallel execution helpers.
//!
//! With the `parallel` feature the work is spread over the rayon pool;
//! without it (or with [`Execution::Sequential`]) the same closures run in a
//! plain loop. Every helper preserves output order and never reduces across
//! threads in a scheduling-dependent order, so results are bit-identical in
//! both modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// `Parallel` only when the crate was built with the `parallel` feature.
    pub fn effective(self) -> Execution {
        if cfg!(feature = "parallel") {
            self
        } else {
            Execution::Sequential
        }
    }
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match exec.effective() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        _ => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
    }
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec.effective() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Applies `f` to consecutive `chunk`-sized pieces of `data` (the last may
/// be shorter), passing the chunk index.
pub fn for_each_chunk_mut<T, F>(exec: Execution, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0);
    match exec.effective() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => data
            .par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
        _ => data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
    }
}
