//! Data-parallel execution policy.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] fans work out
//! over the rayon pool; without it every policy runs sequentially. Results
//! are collected in input order either way, so outputs never depend on
//! the policy or the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn map<T, U, F>(self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(usize, &T) -> U + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect(),
            _ => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
        }
    }

    pub fn map_range<U, F>(self, n: usize, f: F) -> Vec<U>
    where
        U: Send,
        F: Fn(usize) -> U + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Runs two closures, concurrently when the policy allows.
    pub fn join<A, B, RA, RB>(self, a: A, b: B) -> (RA, RB)
    where
        A: FnOnce() -> RA + Send,
        B: FnOnce() -> RB + Send,
        RA: Send,
        RB: Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => rayon::join(a, b),
            _ => (a(), b()),
        }
    }

    /// Limits the global pool to `jobs` threads. Has no effect after the
    /// pool has started or without the `parallel` feature.
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
}
