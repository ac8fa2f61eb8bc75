//! Per-seed fan-out. Seeds share nothing, so order only matters for the
//! output, which keeps input order either way.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Executor {
    /// Rayon pool when the `parallel` feature is on, else sequential.
    #[default]
    Parallel,
    Sequential,
}

pub fn map_seeds<T, F>(exec: Executor, seeds: &[u64], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Executor::Parallel => {
            use rayon::prelude::*;
            seeds.par_iter().map(|&s| f(s)).collect()
        }
        _ => seeds.iter().map(|&s| f(s)).collect(),
    }
}
