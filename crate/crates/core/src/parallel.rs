//! Worker pool with order-preserving maps.
//!
//! Results always come back in index order, so any reduction done afterwards
//! is independent of the pool size.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub struct Workers {
    pool: Option<rayon::ThreadPool>,
    count: usize,
}

impl Workers {
    pub fn new(count: usize) -> Result<Self> {
        if count <= 1 {
            return Ok(Self::sequential());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(count)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("cannot build worker pool: {e}")))?;
        Ok(Workers {
            pool: Some(pool),
            count,
        })
    }

    pub fn sequential() -> Self {
        Workers {
            pool: None,
            count: 1,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match &self.pool {
            None => (0..n).map(f).collect(),
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }

    /// Like [`Self::map`] with per-task scratch state created by `init`.
    /// Scratch contents must not influence results.
    pub fn map_init<S, T, I, F>(&self, n: usize, init: I, f: F) -> Vec<T>
    where
        T: Send,
        I: Fn() -> S + Sync + Send,
        F: Fn(&mut S, usize) -> T + Sync + Send,
    {
        match &self.pool {
            None => {
                let mut s = init();
                (0..n).map(|i| f(&mut s, i)).collect()
            }
            Some(pool) => pool.install(|| {
                (0..n)
                    .into_par_iter()
                    .map_init(&init, |s, i| f(s, i))
                    .collect()
            }),
        }
    }
}

impl Default for Workers {
    fn default() -> Self {
        Self::sequential()
    }
}
