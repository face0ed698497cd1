//! Data-parallel map over independent work items.
//!
//! Built on rayon when the `parallel` feature is enabled (the default);
//! otherwise everything degrades to the sequential path. Results always come
//! back in input order, and reductions downstream must stay order-based
//! (e.g. "lowest residual, earliest time" picks), so parallel and sequential
//! runs are bitwise identical.

/// Execution strategy for multi-start solvers and batch runs. `Parallel` is
/// a no-op without the `parallel` feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Exec {
    #[default]
    Parallel,
    Sequential,
}

/// Map `f` over `items`, preserving order.
pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        Exec::Sequential => items.iter().map(f).collect(),
        Exec::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.iter().map(f).collect()
            }
        }
    }
}
