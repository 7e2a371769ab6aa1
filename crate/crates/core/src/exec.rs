//! Sequential or data-parallel evaluation of independent work items.
//!
//! With the `parallel` feature disabled every mode runs sequentially, so
//! results never depend on the feature set.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Sequential,
    Parallel,
}

impl Execution {
    /// Map `f` over `items`, preserving input order.
    pub fn map<T, R, F>(self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => items.into_iter().map(f).collect(),
            Execution::Parallel => par_map(items, f),
        }
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    items.into_iter().map(f).collect()
}

/// Run `op` inside a worker pool of `workers` threads. One worker (or a
/// build without the `parallel` feature) runs `op` on the calling thread.
pub fn with_workers<R: Send>(workers: usize, op: impl FnOnce(Execution) -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if workers > 1 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
                return pool.install(|| op(Execution::Parallel));
            }
            log::warn!("could not build a {workers}-thread pool; running sequentially");
        }
    }
    let _ = workers;
    op(Execution::Sequential)
}
