//! Shared outer loop: task sampling, parallel gradient reduction, clipping,
//! scheduling and the adaptive-moment update.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::{clip_gradients, global_norm, Adam};
use super::parallel::{canonical_order, parallel_outer_step, TaskOutcome};
use super::schedule::lr_schedule;
use crate::error::{Error, Result};
use crate::numcore::ParamSet;
use crate::seeds;

const SAMPLER_STREAM: u64 = 0x5A4D;
const DROPOUT_STREAM: u64 = 0xD40;

/// Uniform task sampling without replacement inside an epoch.
///
/// Each epoch is a fresh permutation of the sorted task keys drawn from the
/// run seed; batches that would straddle an epoch boundary start the next
/// epoch instead.
#[derive(Clone, Debug)]
pub struct TaskSampler {
    keys: Vec<String>,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl TaskSampler {
    pub fn new(mut keys: Vec<String>, seed: u64) -> Self {
        keys.sort();
        let mut s = Self {
            keys,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut rng = seeds::stream(self.seed, &[SAMPLER_STREAM, self.epoch]);
        self.order = (0..self.keys.len()).collect();
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Next `size` distinct keys (capped at the number of tasks).
    pub fn next_batch(&mut self, size: usize) -> Vec<String> {
        let size = size.min(self.keys.len());
        if self.pos + size > self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let batch = self.order[self.pos..self.pos + size]
            .iter()
            .map(|&i| self.keys[i].clone())
            .collect();
        self.pos += size;
        batch
    }
}

/// Random stream for dropout masks of one forward pass.
///
/// `phase` 0 is the outer (query) pass; inner step `k` uses `k + 1`.
pub fn dropout_rng(seed: u64, step: usize, task_key: &str, phase: usize) -> rand_chacha::ChaCha8Rng {
    seeds::stream(
        seed,
        &[
            DROPOUT_STREAM,
            step as u64,
            seeds::fnv1a(task_key.as_bytes()),
            phase as u64,
        ],
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Joint gradient norm before clipping.
    pub grad_norm: f64,
    pub wall_ms: f64,
    /// Joint gradient norm actually applied.
    #[serde(skip)]
    pub applied_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub total_ms: f64,
    pub final_params: ParamSet,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.lr).collect()
    }

    pub fn grad_norms(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.grad_norm).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// One JSON object per outer step.
    pub fn write_metrics(&self, mut out: impl Write) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn as_divergence(step: usize, e: Error) -> Error {
    if e.is_numerical() {
        Error::Divergence {
            step,
            reason: e.to_string(),
        }
    } else {
        e
    }
}

/// Runs `config.total_steps` outer steps.
///
/// `task_fn(params, key, step)` returns one task's gradient and loss at the
/// current parameters. Entries whose names start with `frozen_prefix` get
/// zero gradient.
pub fn run_outer_loop<F>(
    keys: Vec<String>,
    init: ParamSet,
    config: &TrainConfig,
    frozen_prefix: Option<&str>,
    task_fn: F,
) -> Result<(ParamSet, TrainReport)>
where
    F: Fn(&ParamSet, &str, usize) -> Result<TaskOutcome> + Sync,
{
    config.validate()?;
    if keys.is_empty() {
        return Err(Error::Data("no train-eligible tasks".into()));
    }
    let mut sampler = TaskSampler::new(keys, config.seed);
    let mut params = init;
    let mut adam = Adam::new(&params);
    let mut steps = Vec::with_capacity(config.total_steps);
    let started = Instant::now();

    for step in 0..config.total_steps {
        let t0 = Instant::now();
        let mut batch = sampler.next_batch(config.tasks_per_batch);
        canonical_order(&mut batch);
        let snapshot = &params;
        let (mut grads, losses) = parallel_outer_step(&batch, config.workers, |key: &String| {
            task_fn(snapshot, key, step)
        })
        .map_err(|e| as_divergence(step, e))?;

        let mut loss_sum = 0.0;
        for l in &losses {
            loss_sum += l;
        }
        let loss = loss_sum / losses.len() as f64;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Divergence {
                step,
                reason: "non-finite loss or gradient".into(),
            });
        }
        if let Some(prefix) = frozen_prefix {
            for (name, t) in grads.entries_mut() {
                if name.starts_with(prefix) {
                    t.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let grad_norm = global_norm(&grads);
        if let Some(c) = config.clip_norm {
            grads = clip_gradients(&grads, c)?;
        }
        let applied_norm = global_norm(&grads);
        let lr = lr_schedule(step, config);
        adam.update(&mut params, &grads, lr)
            .map_err(|e| as_divergence(step, e))?;
        steps.push(StepRecord {
            step,
            loss,
            lr,
            grad_norm,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            applied_norm,
        });
    }

    let report = TrainReport {
        steps,
        total_ms: started.elapsed().as_secs_f64() * 1e3,
        final_params: params.clone(),
    };
    Ok((params, report))
}
