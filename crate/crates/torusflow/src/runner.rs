//! Thread-pool implementation of [`ReplicaRunner`].

use rayon::prelude::*;
use torusflow_core::runner::ReplicaRunner;

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "TORUSFLOW_WORKERS";

#[derive(Debug)]
pub struct Parallel {
    pool: rayon::ThreadPool,
}

impl Parallel {
    /// `None` lets rayon pick one worker per available core.
    pub fn new(workers: Option<usize>) -> Result<Self, rayon::ThreadPoolBuildError> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = workers {
            b = b.num_threads(n.max(1));
        }
        Ok(Self { pool: b.build()? })
    }

    /// Reads [`WORKERS_ENV`]; an unparsable value is an error.
    pub fn from_env() -> Result<Self, String> {
        let workers = match std::env::var(WORKERS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| format!("{WORKERS_ENV}={v:?} is not a worker count"))?),
            Err(_) => None,
        };
        Self::new(workers).map_err(|e| e.to_string())
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl ReplicaRunner for Parallel {
    fn map<T, F>(&self, count: u32, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(u32) -> T + Sync + Send,
    {
        self.pool.install(|| (0..count).into_par_iter().map(f).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use torusflow_core::runner::Sequential;

    #[test]
    fn matches_sequential_order() {
        let p = Parallel::new(Some(3)).unwrap();
        assert_eq!(p.workers(), 3);
        let f = |r: u32| (r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        assert_eq!(p.map(100, f), Sequential.map(100, f));
    }
}
