//! Optional data-parallel evaluation on a dedicated thread pool.

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Worker pool handle; one worker means plain serial execution.
#[derive(Clone, Debug, Default)]
pub struct Workers {
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl Workers {
    pub fn serial() -> Self {
        Self { pool: None }
    }

    pub fn new(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config(vec!["workers must be at least 1".into()]));
        }
        if count == 1 {
            return Ok(Self::serial());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(count)
            .build()
            .map_err(|e| Error::Config(vec![format!("cannot start worker pool: {e}")]))?;
        Ok(Self {
            pool: Some(Arc::new(pool)),
        })
    }

    pub fn count(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    /// `(0..count).map(f)`, in parallel when a pool is present; order is preserved.
    pub fn map<T, F>(&self, count: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match &self.pool {
            Some(pool) => pool.install(|| (0..count).into_par_iter().map(&f).collect()),
            None => (0..count).map(f).collect(),
        }
    }
}

/// Independent generator for item `index` of a batch seeded by `base`.
/// Results therefore do not depend on how items are spread over workers.
pub fn substream(base: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index as u64);
    rng
}

/// Draws a fresh batch seed from a parent generator.
pub fn batch_seed<R: RngCore + ?Sized>(rng: &mut R) -> u64 {
    rng.next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn worker_count_does_not_change_results() {
        let f = |i: usize| substream(42, i).random::<u64>();
        let serial = Workers::serial().map(16, f);
        let pooled = Workers::new(3).unwrap().map(16, f);
        assert_eq!(serial, pooled);
        assert_ne!(serial[0], serial[1]);
    }
}
