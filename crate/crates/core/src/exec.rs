//! Execution mode for data-parallel loops.
//!
//! With the `parallel` feature, `Exec::Parallel` runs on a rayon pool of the
//! requested size. Without it every mode runs sequentially. Results are always
//! returned in input order, so outputs never depend on the mode.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// `threads == 0` uses the global rayon pool.
    Parallel { threads: usize },
}

impl Default for Exec {
    fn default() -> Self {
        Exec::Parallel { threads: 0 }
    }
}

impl Exec {
    /// `jobs <= 1` is sequential.
    pub fn from_jobs(jobs: usize) -> Self {
        if jobs <= 1 {
            Exec::Sequential
        } else {
            Exec::Parallel { threads: jobs }
        }
    }

    pub fn is_parallel(&self) -> bool {
        cfg!(feature = "parallel") && matches!(self, Exec::Parallel { .. })
    }

    /// Ordered map over a slice.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel { threads } => {
                use rayon::prelude::*;
                run_in_pool(*threads, || items.par_iter().map(&f).collect())
            }
            _ => items.iter().map(f).collect(),
        }
    }

    /// Ordered map that stops at the first error (in input order).
    pub fn try_map<T, R, E, F>(&self, items: &[T], f: F) -> Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(&T) -> Result<R, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}

#[cfg(feature = "parallel")]
fn run_in_pool<R: Send>(threads: usize, op: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        return op();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(op),
        Err(e) => {
            log::warn!("could not build a {threads}-thread pool ({e}); using the global pool");
            op()
        }
    }
}
