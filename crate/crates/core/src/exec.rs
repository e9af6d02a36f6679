//! Execution mode for the data-parallel kernels.
//!
//! Every kernel splits its output into disjoint chunks (one output plane,
//! one row, one sample) and computes each chunk with a fixed sequential
//! reduction order. The parallel and sequential paths therefore produce
//! bit-identical results; only the scheduling differs.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How a kernel schedules its independent output chunks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Exec {
    Sequential,
    /// Fans chunks out over the current rayon pool. Without the `parallel`
    /// feature this behaves exactly like `Sequential`.
    #[default]
    Parallel,
}

impl Exec {
    /// Calls `f(index, chunk)` for each `chunk_len`-sized chunk of `data`.
    pub fn for_each_chunk<F>(self, data: &mut [f64], chunk_len: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Send + Sync,
    {
        if chunk_len == 0 {
            return;
        }
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c)),
            _ => data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c)),
        }
    }

    /// Maps `0..n` through `f`, preserving index order in the result.
    pub fn map_range<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Send + Sync,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// True when this build can actually run kernels in parallel.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}
