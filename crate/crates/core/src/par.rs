//! Data-parallel map helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the maps run on rayon's global pool;
//! without it they run on the calling thread. Because every work item derives
//! its own RNG stream and results are collected in index order, both modes
//! produce bit-identical output. [`force_sequential`] switches the rayon build
//! to the sequential code path at runtime, which is what the benchmark suite
//! uses to compare the two on equal footing.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::Result;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Routes subsequent maps through the sequential fallback even when the
/// `parallel` feature is compiled in. Intended for benchmarking and debugging.
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

/// Whether maps currently run on the thread pool.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// `(0..n).map(f)` collected in index order, parallel when available.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Fallible variant; reports the lowest-index error so failure surfaces
/// deterministically regardless of scheduling.
pub fn try_map_indexed<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let results = map_indexed(n, f);
    let mut out = Vec::with_capacity(n);
    for r in results {
        out.push(r?);
    }
    Ok(out)
}

/// Number of worker threads the parallel maps will use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            return rayon::current_num_threads();
        }
    }
    1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_maps_agree_bitwise() {
        let f = |i: usize| {
            use rand::Rng;
            let mut rng = crate::rng::stream_rng(9, crate::rng::StreamDomain::Kernel, 0, i as u64);
            rng.random::<f64>() + i as f64
        };
        let par: Vec<f64> = map_indexed(64, f);
        force_sequential(true);
        let seq: Vec<f64> = map_indexed(64, f);
        force_sequential(false);
        assert_eq!(par, seq);
    }

    #[test]
    fn try_map_reports_the_lowest_index_error() {
        let r = try_map_indexed(10, |i| {
            if i >= 4 {
                Err(crate::Error::InvalidSpec(format!("boom {i}")))
            } else {
                Ok(i)
            }
        });
        match r {
            Err(crate::Error::InvalidSpec(msg)) => assert_eq!(msg, "boom 4"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
