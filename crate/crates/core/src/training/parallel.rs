//! Deterministic task-parallel gradient computation.
//!
//! Tasks of a batch are put in a canonical order (FNV-1a hash of the task
//! key, then the key), cut into contiguous shards, and processed on one
//! thread per shard. Per-task results are returned to the coordinator and
//! reduced in canonical order, so the sum is bit-identical for any worker
//! count.

use std::thread;

use crate::error::{Error, Result};
use crate::numcore::ParamSet;
use crate::seeds::fnv1a;

/// Gradient and loss contributed by one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutcome {
    pub grads: ParamSet,
    pub loss: f64,
}

/// Sorts keys into the canonical reduction order.
pub fn canonical_order<K: AsRef<str>>(keys: &mut [K]) {
    keys.sort_by(|a, b| {
        let (a, b) = (a.as_ref(), b.as_ref());
        fnv1a(a.as_bytes())
            .cmp(&fnv1a(b.as_bytes()))
            .then_with(|| a.cmp(b))
    });
}

/// Splits `len` items into `workers` contiguous shard ranges (some may be empty).
pub fn shard_ranges(len: usize, workers: usize) -> Vec<std::ops::Range<usize>> {
    let workers = workers.max(1);
    let base = len / workers;
    let extra = len % workers;
    let mut out = Vec::with_capacity(workers);
    let mut start = 0;
    for w in 0..workers {
        let size = base + usize::from(w < extra);
        out.push(start..start + size);
        start += size;
    }
    out
}

/// Applies `f` to every item on up to `workers` threads, preserving order.
pub fn map_ordered<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<Result<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let ranges = shard_ranges(items.len(), workers);
    let f = &f;
    let mut shards: Vec<Vec<Result<R>>> = thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .iter()
            .map(|r| {
                let chunk = &items[r.clone()];
                scope.spawn(move || chunk.iter().map(f).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| vec![Err(Error::Worker("worker thread panicked".into()))])
            })
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for shard in shards.drain(..) {
        out.extend(shard);
    }
    out
}

/// Computes every task's outcome in parallel and sums them in canonical order.
///
/// `batch` must already be in canonical order. Any task failure fails the
/// whole step. Returns the summed gradient and the per-task losses.
pub fn parallel_outer_step<T, F>(
    batch: &[T],
    workers: usize,
    step_fn: F,
) -> Result<(ParamSet, Vec<f64>)>
where
    T: Sync,
    F: Fn(&T) -> Result<TaskOutcome> + Sync,
{
    if batch.is_empty() {
        return Err(Error::Data("empty task batch".into()));
    }
    let results = map_ordered(batch, workers, step_fn);
    let mut sum: Option<ParamSet> = None;
    let mut losses = Vec::with_capacity(results.len());
    for r in results {
        let outcome = r?;
        losses.push(outcome.loss);
        sum = Some(match sum {
            None => outcome.grads,
            Some(acc) => acc.add(&outcome.grads)?,
        });
    }
    Ok((sum.expect("non-empty batch"), losses))
}
