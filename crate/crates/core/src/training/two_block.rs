//! Two-block meta-learning: only the meta block adapts per task, the global
//! block is learned across tasks from the same query losses.

use std::collections::BTreeMap;

use rand::RngCore;

use super::bundle::{BundleArch, MetaBlockArch, ModelBundle, GLOBAL_PREFIX, META_PREFIX};
use super::config::TrainConfig;
use super::outer::{dropout_rng, run_outer_loop, TrainReport};
use super::parallel::TaskOutcome;
use crate::data::{batch_of, FeatureView, Sample, TaskCollection};
use crate::error::{Error, Result};
use crate::numcore::adapt::adapt_in_graph;
use crate::numcore::mlp::Mode;
use crate::numcore::{bce_mean, Graph, ParamSet, ParamVars, Tensor, Var};

/// Meta features, other features and labels of a sample list.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitBatch {
    pub meta: Tensor,
    pub other: Tensor,
    pub labels: Vec<f64>,
}

impl SplitBatch {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let m = batch_of(samples, FeatureView::Meta)?;
        let o = batch_of(samples, FeatureView::Other)?;
        Ok(Self {
            meta: m.features,
            other: o.features,
            labels: m.labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl BundleArch {
    /// Copy with inverted dropout on the hidden layers of both blocks.
    pub fn with_hidden_dropout(&self, rate: f64) -> Self {
        let mut out = self.clone();
        if let MetaBlockArch::Mlp { spec } = &mut out.meta {
            *spec = spec.clone().with_hidden_dropout(rate);
        }
        out.global = out.global.clone().with_hidden_dropout(rate);
        out
    }

    /// Mean cross-entropy of the full network on `batch`.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        meta: &ParamVars,
        global: &ParamVars,
        batch: &SplitBatch,
        mode: Mode,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let mx = g.constant(batch.meta.clone());
        let ox = g.constant(batch.other.clone());
        let emb = match rng.as_mut() {
            Some(r) => self.meta_embed_graph(g, meta, mx, mode, Some(r as &mut dyn RngCore))?,
            None => self.meta_embed_graph(g, meta, mx, mode, None)?,
        };
        let input = self.global_input_graph(g, emb, mx, ox);
        let p = self.global.forward_graph(g, global, input, mode, rng)?;
        bce_mean(g, p, &batch.labels)
    }
}

/// Result of one task's contribution to an outer step.
#[derive(Clone, Debug, PartialEq)]
pub struct LimamlTaskResult {
    /// Gradient over the joint parameter set (`meta.` / `global.` names).
    pub outcome: TaskOutcome,
    /// The task's adapted meta parameters (task-local layout).
    pub adapted_meta: ParamSet,
    /// Global parameter values read back from the graph after the inner loop.
    pub global_after_inner: ParamSet,
}

/// One task's outer-step gradient.
///
/// The inner loop adapts only the task's meta parameters on `support`, with
/// the global block held as graph constants. The query loss with the adapted
/// meta block feeding the global block gives the second-order meta gradient
/// and the first-order global gradient. With `global_uses_adapted_meta` off,
/// the global gradient instead comes from a second query pass through the
/// un-adapted meta block.
#[allow(clippy::too_many_arguments)]
pub fn limaml_task_step(
    arch: &BundleArch,
    meta: &ParamSet,
    global: &ParamSet,
    key: &str,
    support: &SplitBatch,
    query: &SplitBatch,
    config: &TrainConfig,
    step: usize,
) -> Result<LimamlTaskResult> {
    let local = arch.task_meta(meta, key);
    let mut g = Graph::new();
    let meta_vars = local.to_leaves(&mut g);
    let global_consts = global.to_constants(&mut g);

    let adapted = adapt_in_graph(&mut g, &meta_vars, config.alpha, config.inner_steps, |g, p, k| {
        let mut rng = dropout_rng(config.seed, step, key, k + 1);
        arch.loss_graph(g, p, &global_consts, support, Mode::Train, Some(&mut rng))
    })?;
    let global_after_inner = global_consts.values(&g);

    let global_vars = global.to_leaves(&mut g);
    let mut rng = dropout_rng(config.seed, step, key, 0);
    let loss = arch.loss_graph(&mut g, &adapted, &global_vars, query, Mode::Train, Some(&mut rng))?;
    let loss_value = g.value(loss).item();

    let (meta_grads, global_grads) = if config.global_uses_adapted_meta {
        let mut wrt = meta_vars.vars();
        wrt.extend(global_vars.vars());
        let all = g.grad(loss, &wrt)?;
        let (m, gl) = all.split_at(meta_vars.vars().len());
        (
            meta_vars.with_vars(m.to_vec()).values(&g),
            global_vars.with_vars(gl.to_vec()).values(&g),
        )
    } else {
        let m = g.grad(loss, &meta_vars.vars())?;
        let meta_consts = local.to_constants(&mut g);
        let mut rng = dropout_rng(config.seed, step, key, 0);
        let plain =
            arch.loss_graph(&mut g, &meta_consts, &global_vars, query, Mode::Train, Some(&mut rng))?;
        let gl = g.grad(plain, &global_vars.vars())?;
        (
            meta_vars.with_vars(m).values(&g),
            global_vars.with_vars(gl).values(&g),
        )
    };

    let full_meta_grads = arch.scatter_task_meta(&meta.zeros_like(), key, &meta_grads);
    let grads = full_meta_grads
        .prefixed(META_PREFIX)
        .merged(&global_grads.prefixed(GLOBAL_PREFIX))?;
    Ok(LimamlTaskResult {
        outcome: TaskOutcome {
            grads,
            loss: loss_value,
        },
        adapted_meta: adapted.values(&g),
        global_after_inner,
    })
}

/// Trains both blocks of `bundle` on the train-eligible tasks.
pub fn limaml_train(
    tasks: &TaskCollection,
    bundle: &ModelBundle,
    config: &TrainConfig,
) -> Result<(ModelBundle, TrainReport)> {
    bundle.arch.validate()?;
    if tasks.meta_dim() != bundle.arch.meta_dim || tasks.other_dim() != bundle.arch.other_dim {
        return Err(Error::Architecture(format!(
            "bundle expects {}+{} features, data has {}+{}",
            bundle.arch.meta_dim,
            bundle.arch.other_dim,
            tasks.meta_dim(),
            tasks.other_dim()
        )));
    }
    let arch = bundle.arch.with_hidden_dropout(config.dropout);
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
                SplitBatch::from_samples(t.support())?,
                SplitBatch::from_samples(t.query())?,
            ),
        );
    }
    let keys = sets.keys().cloned().collect();
    let frozen = config.freeze_meta.then_some(META_PREFIX);
    let (joint, report) = run_outer_loop(keys, bundle.joint_params(), config, frozen, |params, key, step| {
        let (support, query) = &sets[key];
        let meta = params.strip_prefix(META_PREFIX);
        let global = params.strip_prefix(GLOBAL_PREFIX);
        limaml_task_step(&arch, &meta, &global, key, support, query, config, step)
            .map(|r| r.outcome)
    })?;
    Ok((bundle.with_joint_params(&joint)?, report))
}
