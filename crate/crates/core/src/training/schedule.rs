use std::f64::consts::PI;

use super::config::{Decay, TrainConfig};

/// Cosine decay ends at this fraction of the base rate.
pub const FINAL_LR_FRACTION: f64 = 0.1;

/// Outer-loop learning rate at `step`.
///
/// Linear warmup from 0 to `beta` over `warmup_steps`, then either constant
/// or cosine decay reaching `0.1 * beta` at `total_steps`.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> f64 {
    let beta = config.beta;
    let warmup = config.warmup_steps;
    if step < warmup {
        return beta * step as f64 / warmup as f64;
    }
    match config.decay {
        Decay::None => beta,
        Decay::Cosine => {
            let span = config.total_steps.saturating_sub(warmup);
            if span == 0 {
                return beta;
            }
            let progress = ((step - warmup) as f64 / span as f64).min(1.0);
            let drop = (1.0 - FINAL_LR_FRACTION) * 0.5 * (1.0 - (PI * progress).cos());
            beta * (1.0 - drop)
        }
    }
}

/// Linear learning-rate scaling with the number of tasks per batch.
pub fn scale_lr(beta_base: f64, tasks_per_batch: usize, base_batch: usize) -> f64 {
    beta_base * tasks_per_batch as f64 / base_batch as f64
}
