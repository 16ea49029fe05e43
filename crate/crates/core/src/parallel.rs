//! Data-parallel helpers with a sequential fallback.
//!
//! Every parallel split in this crate partitions *outputs*: each worker owns
//! a disjoint chunk and performs the same floating-point operations in the
//! same order as the sequential loop would. Results are therefore
//! bit-identical whichever path runs. Deterministic mode forces the
//! sequential path regardless of the `parallel` feature.

use std::sync::atomic::{AtomicBool, Ordering};

static DETERMINISTIC: AtomicBool = AtomicBool::new(false);

/// Force (or release) sequential execution for every helper in this module.
pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::SeqCst);
}

pub fn is_deterministic() -> bool {
    DETERMINISTIC.load(Ordering::SeqCst)
}

/// True when the rayon path is compiled in and not disabled at runtime.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !is_deterministic()
}

/// Caps the global worker pool. Has no effect without the `parallel` feature
/// or after the pool has already been initialised.
pub fn configure_threads(jobs: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = jobs;
}

/// Calls `f(chunk_index, chunk)` for each `chunk_len`-sized piece of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() && data.len() > chunk_len {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Evaluates `f(0..n)` and collects the results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_visit_every_element_once() {
        let mut v = vec![0u32; 103];
        for_each_chunk_mut(&mut v, 10, |i, c| {
            for x in c.iter_mut() {
                *x += 1 + i as u32;
            }
        });
        assert_eq!(v[0], 1);
        assert_eq!(v[102], 11);
        assert!(v.iter().all(|&x| x > 0));
    }

    #[test]
    fn map_preserves_order() {
        let out = map_indexed(50, |i| i * i);
        assert_eq!(out, (0..50).map(|i| i * i).collect::<Vec<_>>());
    }
}
