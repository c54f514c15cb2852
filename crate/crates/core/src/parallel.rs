//! Worker pool sized by the `LANPOSE_THREADS` environment variable.

use std::sync::OnceLock;

use rayon::{ThreadPool, ThreadPoolBuilder};

pub const THREADS_ENV: &str = "LANPOSE_THREADS";

/// Shared pool; `LANPOSE_THREADS` caps the worker count (default: all cores).
pub fn thread_pool() -> &'static ThreadPool {
    static POOL: OnceLock<ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let cap = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0);
        let available = std::thread::available_parallelism().map_or(1, |n| n.get());
        ThreadPoolBuilder::new()
            .num_threads(cap.map_or(available, |c| c.min(available)))
            .build()
            .expect("thread pool")
    })
}
