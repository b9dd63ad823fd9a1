//! Single-network trainers: task-grouped plain training and full-network MAML.

use std::collections::BTreeMap;

use rand::RngCore;

use super::config::TrainConfig;
use super::outer::{dropout_rng, run_outer_loop, TrainReport};
use super::parallel::TaskOutcome;
use crate::data::{batch_of, FeatureView, TaskCollection};
use crate::error::{Error, Result};
use crate::numcore::adapt::{adapt_in_graph, meta_gradient_in_graph};
use crate::numcore::{bce_mean, Batch, Graph, MlpSpec, Mode, ParamSet, ParamVars, Var};

fn mlp_loss(
    g: &mut Graph,
    spec: &MlpSpec,
    params: &ParamVars,
    batch: &Batch,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let x = g.constant(batch.features.clone());
    let p = spec.forward_graph(g, params, x, Mode::Train, Some(rng))?;
    bce_mean(g, p, &batch.labels)
}

/// Task-grouped training without an inner loop.
///
/// Every sample of a task is plain training data. The batch gradient is the
/// sum over the sampled tasks of each task's mean-loss gradient.
pub fn vanilla_train(
    tasks: &TaskCollection,
    spec: &MlpSpec,
    init: ParamSet,
    config: &TrainConfig,
) -> Result<(ParamSet, TrainReport)> {
    spec.check_params(&init)?;
    let train_spec = spec.clone().with_hidden_dropout(config.dropout);
    let mut batches = BTreeMap::new();
    for t in tasks.tasks().filter(|t| !t.is_empty()) {
        batches.insert(t.task_key.clone(), batch_of(t.samples(), FeatureView::Joined)?);
    }
    let keys = batches.keys().cloned().collect();
    run_outer_loop(keys, init, config, None, |params, key, step| {
        let batch = &batches[key];
        let mut g = Graph::new();
        let leaves = params.to_leaves(&mut g);
        let mut rng = dropout_rng(config.seed, step, key, 0);
        let loss = mlp_loss(&mut g, &train_spec, &leaves, batch, &mut rng)?;
        let value = g.value(loss).item();
        let grads = g.grad(loss, &leaves.vars())?;
        Ok(TaskOutcome {
            grads: leaves.with_vars(grads).values(&g),
            loss: value,
        })
    })
}

/// Full-network MAML with exact second-order meta-gradients.
///
/// Each sampled task adapts all parameters with `inner_steps` full-batch
/// steps of size `alpha` on its support set; the query loss at the adapted
/// parameters is differentiated back to the shared initialization.
pub fn maml_train(
    tasks: &TaskCollection,
    spec: &MlpSpec,
    init: ParamSet,
    config: &TrainConfig,
) -> Result<(ParamSet, TrainReport)> {
    spec.check_params(&init)?;
    let train_spec = spec.clone().with_hidden_dropout(config.dropout);
    let mut sets = BTreeMap::new();
    for t in tasks.tasks() {
        if !t.is_train_eligible() {
            if !t.is_empty() {
                log::warn!("skipping task {}: needs non-empty support and query", t.task_key);
            }
            continue;
        }
        sets.insert(
            t.task_key.clone(),
            (
                batch_of(t.support(), FeatureView::Joined)?,
                batch_of(t.query(), FeatureView::Joined)?,
            ),
        );
    }
    let keys = sets.keys().cloned().collect();
    run_outer_loop(keys, init, config, None, |params, key, step| {
        let (support, query) = &sets[key];
        let mut g = Graph::new();
        let leaves = params.to_leaves(&mut g);
        let (grads, loss) = meta_gradient_in_graph(
            &mut g,
            &leaves,
            config.alpha,
            config.inner_steps,
            |g, p, k| {
                let mut rng = dropout_rng(config.seed, step, key, k + 1);
                mlp_loss(g, &train_spec, p, support, &mut rng)
            },
            |g, p| {
                let mut rng = dropout_rng(config.seed, step, key, 0);
                mlp_loss(g, &train_spec, p, query, &mut rng)
            },
        )?;
        Ok(TaskOutcome { grads, loss })
    })
}

/// `k` full-batch gradient steps of size `alpha` on `batch`, in eval mode.
///
/// This is the task-level fine-tuning used at evaluation time.
pub fn fine_tune(
    spec: &MlpSpec,
    params: &ParamSet,
    batch: &Batch,
    alpha: f64,
    k: usize,
) -> Result<ParamSet> {
    if k == 0 {
        return Ok(params.clone());
    }
    if batch.is_empty() {
        return Err(Error::Data("fine-tuning on an empty batch".into()));
    }
    let mut g = Graph::new();
    let leaves = params.to_leaves(&mut g);
    let adapted = adapt_in_graph(&mut g, &leaves, alpha, k, |g, p, _| {
        let x = g.constant(batch.features.clone());
        let out = spec.forward_graph(g, p, x, Mode::Eval, None)?;
        bce_mean(g, out, &batch.labels)
    })?;
    Ok(adapted.values(&g))
}
