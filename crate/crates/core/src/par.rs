//! Ordered data-parallel map with a sequential fallback.
//!
//! Results always come back in input order, so reductions performed by the
//! caller are independent of how many workers produced them.

/// Number of worker threads to use for per-image work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Workers(pub usize);

impl Workers {
    pub const SEQUENTIAL: Workers = Workers(1);

    /// Reads `FVLAYER_THREADS`, falling back to the machine's parallelism.
    pub fn from_env() -> Workers {
        std::env::var("FVLAYER_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .map(Workers)
            .unwrap_or_else(Workers::available)
    }

    pub fn available() -> Workers {
        Workers(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
    }
}

impl Default for Workers {
    fn default() -> Self {
        Workers::SEQUENTIAL
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map_ordered<T, R, F>(workers: Workers, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    if workers.0 <= 1 || items.len() <= 1 {
        return map_sequential(items, f);
    }
    map_parallel(workers, items, f)
}

pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(usize, &T) -> R,
{
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(feature = "parallel")]
fn map_parallel<T, R, F>(workers: Workers, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    with_pool(workers, || {
        items
            .par_iter()
            .enumerate()
            .map(|(i, x)| f(i, x))
            .collect()
    })
}

#[cfg(not(feature = "parallel"))]
fn map_parallel<T, R, F>(_workers: Workers, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    map_sequential(items, f)
}

#[cfg(feature = "parallel")]
fn with_pool<R: Send>(workers: Workers, op: impl FnOnce() -> R + Send) -> R {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex, OnceLock};

    // Pools are cached per size; building one per batch costs more than the
    // batch itself for small problems.
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    let pool = {
        let mut pools = POOLS.get_or_init(Default::default).lock().unwrap();
        pools
            .entry(workers.0)
            .or_insert_with(|| {
                Arc::new(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(workers.0)
                        .build()
                        .expect("failed to build rayon pool"),
                )
            })
            .clone()
    };
    pool.install(op)
}
