//! Batch-parallel execution with per-batch random streams.
//!
//! Paths are grouped into fixed-size batches. Batch `b` draws from a ChaCha8
//! stream keyed by `(seed, b)`, and batch results are returned in batch order,
//! so any merge done by the caller is independent of thread count.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Sampling units per batch.
pub const BATCH_SIZE: usize = 1024;

/// How batches are scheduled. Without the `parallel` feature both variants
/// run sequentially.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

/// Random stream of one batch.
pub fn batch_rng(seed: u64, batch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch);
    rng
}

pub fn batch_ranges(units: usize) -> Vec<Range<usize>> {
    (0..units.div_ceil(BATCH_SIZE))
        .map(|b| b * BATCH_SIZE..((b + 1) * BATCH_SIZE).min(units))
        .collect()
}

/// Runs `work(batch_index, unit_range, rng)` for every batch and returns the
/// results in batch order.
pub fn map_batches<T, F>(units: usize, seed: u64, execution: Execution, work: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, Range<usize>, &mut ChaCha8Rng) -> Result<T> + Sync + Send,
{
    let ranges = batch_ranges(units);
    let run = |(b, range): (usize, Range<usize>)| {
        let mut rng = batch_rng(seed, b as u64);
        work(b, range, &mut rng)
    };
    match execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel => ranges.into_par_iter().enumerate().map(run).collect(),
        _ => ranges.into_iter().enumerate().map(run).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn ranges_cover_units_once() {
        let r = batch_ranges(2 * BATCH_SIZE + 5);
        assert_eq!(r.len(), 3);
        assert_eq!(r[2], 2 * BATCH_SIZE..2 * BATCH_SIZE + 5);
        assert!(batch_ranges(0).is_empty());
    }

    #[test]
    fn streams_differ_between_batches() {
        let a = batch_rng(9, 0).next_u64();
        let b = batch_rng(9, 1).next_u64();
        assert_ne!(a, b);
        assert_eq!(a, batch_rng(9, 0).next_u64());
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let work = |_b: usize, range: Range<usize>, rng: &mut ChaCha8Rng| {
            Ok(range.map(|_| rng.next_u64() % 1000).sum::<u64>())
        };
        let p = map_batches(10_000, 4, Execution::Parallel, work).unwrap();
        let s = map_batches(10_000, 4, Execution::Sequential, work).unwrap();
        assert_eq!(p, s);
    }
}
