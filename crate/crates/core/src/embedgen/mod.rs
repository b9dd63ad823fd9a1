//! Offline meta embedding generation: per-task fine-tuning of the meta block
//! on recent samples, per-sample embeddings, and pooling into one vector.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::data::{Sample, TaskCollection};
use crate::error::{Error, Result};
use crate::numcore::adapt::adapt_in_graph;
use crate::numcore::mlp::Mode;
use crate::numcore::{bce_mean, Graph, ParamSet, ParamVars, Tensor, Var};
use crate::training::{map_ordered, BundleArch, ModelBundle, SplitBatch};

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Latest,
    Max,
    Mean,
    Cos,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latest" => Ok(Pooling::Latest),
            "max" => Ok(Pooling::Max),
            "mean" => Ok(Pooling::Mean),
            "cos" => Ok(Pooling::Cos),
            other => Err(Error::Config(format!(
                "unknown pooling `{other}` (expected latest, max, mean or cos)"
            ))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Latest => "latest",
            Pooling::Max => "max",
            Pooling::Mean => "mean",
            Pooling::Cos => "cos",
        })
    }
}

/// Which loss drives per-task fine-tuning of the meta block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneScope {
    /// Loss of the full network, global block frozen.
    #[default]
    FullNetwork,
    /// Loss of the full network with every non-embedding input of the
    /// global block zeroed, so only the meta path carries signal.
    MetaPath,
}

impl FromStr for FineTuneScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_network" => Ok(FineTuneScope::FullNetwork),
            "meta_path" => Ok(FineTuneScope::MetaPath),
            other => Err(Error::Config(format!(
                "unknown fine-tune scope `{other}` (expected full_network or meta_path)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedGenConfig {
    /// Fine-tuning steps per task.
    pub k: usize,
    /// Fine-tuning step size.
    pub alpha: f64,
    pub window_days: u32,
    pub pooling: Pooling,
    /// Snapshot version, `YYYY-MM-DD`.
    pub version: String,
    pub min_samples: usize,
    /// End of the recency window (epoch seconds). Defaults to the latest
    /// timestamp in the collection.
    pub as_of: Option<i64>,
    pub scope: FineTuneScope,
    pub workers: usize,
}

impl Default for EmbedGenConfig {
    fn default() -> Self {
        Self {
            k: 1,
            alpha: 0.1,
            window_days: 30,
            pooling: Pooling::Latest,
            version: "1970-01-01".into(),
            min_samples: 1,
            as_of: None,
            scope: FineTuneScope::FullNetwork,
            workers: 1,
        }
    }
}

impl EmbedGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_days < 1 {
            return Err(Error::Config("window_days must be at least 1".into()));
        }
        if self.min_samples < 1 {
            return Err(Error::Config("min_samples must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        validate_version(&self.version)
    }
}

/// Accepts exactly the canonical `YYYY-MM-DD` form of a real date.
pub fn validate_version(version: &str) -> Result<()> {
    match NaiveDate::parse_from_str(version, "%Y-%m-%d") {
        Ok(d) if d.format("%Y-%m-%d").to_string() == version => Ok(()),
        _ => Err(Error::Config(format!("version `{version}` is not a YYYY-MM-DD date"))),
    }
}

/// UTC calendar date of an epoch timestamp, as `YYYY-MM-DD`.
pub fn date_of(timestamp: i64) -> Result<String> {
    DateTime::from_timestamp(timestamp, 0)
        .map(|d| d.format("%Y-%m-%d").to_string())
        .ok_or_else(|| Error::Config(format!("timestamp {timestamp} out of range")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaEmbedding {
    pub task_key: String,
    pub vector: Vec<f32>,
    pub version: String,
    pub sample_count_used: usize,
}

/// Why a task produced no embedding.
#[derive(Clone, Debug, PartialEq)]
pub enum SkipReason {
    TooFewSamples { in_window: usize },
    NonFinite(String),
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipReason::TooFewSamples { in_window } => {
                write!(f, "{in_window} samples in window")
            }
            SkipReason::NonFinite(m) => write!(f, "non-finite fine-tune: {m}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationOutput {
    /// Sorted by task key.
    pub embeddings: Vec<MetaEmbedding>,
    pub skipped: Vec<(String, SkipReason)>,
    pub as_of: i64,
}

/// Samples with timestamp in `(as_of - window, as_of]`, chronological.
///
/// `samples` must already be in chronological order.
pub fn select_window(samples: &[Sample], window_days: u32, as_of: i64) -> &[Sample] {
    let start = as_of.saturating_sub(i64::from(window_days) * SECONDS_PER_DAY);
    let lo = samples.partition_point(|s| s.timestamp <= start);
    let hi = samples.partition_point(|s| s.timestamp <= as_of);
    &samples[lo..hi.max(lo)]
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Pools chronologically ordered per-sample embeddings (last = latest).
pub fn pool(vectors: &[Vec<f64>], mode: Pooling) -> Result<Vec<f64>> {
    let latest = vectors
        .last()
        .ok_or_else(|| Error::Data("pooling an empty embedding list".into()))?;
    let dim = latest.len();
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::LengthMismatch {
            expected: dim,
            got: v.len(),
        });
    }
    let n = vectors.len() as f64;
    Ok(match mode {
        Pooling::Latest => latest.clone(),
        Pooling::Max => (0..dim)
            .map(|j| vectors.iter().map(|v| v[j]).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
        Pooling::Mean => (0..dim)
            .map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n)
            .collect(),
        Pooling::Cos => {
            let last = vectors.len() - 1;
            let weights: Vec<f64> = vectors
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    if i == last && latest.iter().any(|x| *x != 0.0) {
                        1.0
                    } else {
                        cosine(v, latest).max(0.0)
                    }
                })
                .collect();
            let total: f64 = weights.iter().sum();
            if total == 0.0 {
                latest.clone()
            } else {
                (0..dim)
                    .map(|j| {
                        vectors
                            .iter()
                            .zip(&weights)
                            .map(|(v, w)| w * v[j])
                            .sum::<f64>()
                            / total
                    })
                    .collect()
            }
        }
    })
}

fn fine_tune_loss(
    arch: &BundleArch,
    g: &mut Graph,
    meta: &ParamVars,
    global: &ParamVars,
    batch: &SplitBatch,
    scope: FineTuneScope,
) -> Result<Var> {
    match scope {
        FineTuneScope::FullNetwork => arch.loss_graph(g, meta, global, batch, Mode::Eval, None),
        FineTuneScope::MetaPath => {
            let mx = g.constant(batch.meta.clone());
            let emb = arch.meta_embed_graph(g, meta, mx, Mode::Eval, None)?;
            let zm = g.constant(Tensor::zeros(batch.len(), arch.meta_dim));
            let zo = g.constant(Tensor::zeros(batch.len(), arch.other_dim));
            let input = arch.global_input_graph(g, emb, zm, zo);
            let p = arch.global.forward_graph(g, global, input, Mode::Eval, None)?;
            bce_mean(g, p, &batch.labels)
        }
    }
}

/// `k` gradient steps of size `alpha` on the task-local meta parameters,
/// with the global block frozen. Runs on copies; the inputs are untouched.
pub fn adapt_meta(
    arch: &BundleArch,
    local: &ParamSet,
    global: &ParamSet,
    batch: &SplitBatch,
    alpha: f64,
    k: usize,
    scope: FineTuneScope,
) -> Result<ParamSet> {
    if k == 0 {
        return Ok(local.clone());
    }
    if batch.is_empty() {
        return Err(Error::Data("fine-tuning on an empty batch".into()));
    }
    let mut g = Graph::new();
    let meta = local.to_leaves(&mut g);
    let frozen = global.to_constants(&mut g);
    let adapted = adapt_in_graph(&mut g, &meta, alpha, k, |g, p, _| {
        fine_tune_loss(arch, g, p, &frozen, batch, scope)
    })?;
    let out = adapted.values(&g);
    if !out.all_finite() {
        return Err(Error::NonFinite("adapted meta parameters".into()));
    }
    Ok(out)
}

/// Fine-tunes the meta block for task `key` on `samples` (chronological)
/// and pools the per-sample embeddings.
///
/// This is the single adaptation path shared by embedding generation and
/// fine-tune evaluation.
#[allow(clippy::too_many_arguments)]
pub fn embed_task(
    bundle: &ModelBundle,
    key: &str,
    samples: &[Sample],
    k: usize,
    alpha: f64,
    pooling: Pooling,
    scope: FineTuneScope,
) -> Result<Vec<f32>> {
    let batch = SplitBatch::from_samples(samples)?;
    if batch.is_empty() {
        return Err(Error::Data(format!("task {key}: no samples to embed")));
    }
    let local = bundle.task_meta(key);
    let adapted = adapt_meta(&bundle.arch, &local, &bundle.global, &batch, alpha, k, scope)?;
    let rows = match pooling {
        Pooling::Latest => {
            let last = batch.meta.rows() - 1;
            Tensor::row(batch.meta.row_slice(last).to_vec())
        }
        _ => batch.meta.clone(),
    };
    let emb = bundle.arch.meta_embed_infer(&adapted, &rows)?;
    let per_sample: Vec<Vec<f64>> = (0..emb.rows()).map(|i| emb.row_slice(i).to_vec()).collect();
    let pooled = pool(&per_sample, pooling)?;
    if pooled.iter().any(|v| !v.is_finite() || !(*v as f32).is_finite()) {
        return Err(Error::NonFinite(format!("embedding of task {key}")));
    }
    Ok(pooled.into_iter().map(|v| v as f32).collect())
}

/// Runs generation over every task of `tasks`.
///
/// Tasks with fewer than `min_samples` samples in the window, or whose
/// fine-tuning goes non-finite, are skipped and reported.
pub fn generate_embeddings(
    tasks: &TaskCollection,
    bundle: &ModelBundle,
    config: &EmbedGenConfig,
) -> Result<GenerationOutput> {
    config.validate()?;
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
    let as_of = match config.as_of {
        Some(t) => t,
        None => tasks.samples().map(|s| s.timestamp).max().unwrap_or(0),
    };
    let all: Vec<_> = tasks.tasks().collect();
    let results = map_ordered(&all, config.workers, |t| {
        let window = select_window(t.samples(), config.window_days, as_of);
        if window.len() < config.min_samples || window.is_empty() {
            return Ok(Err(SkipReason::TooFewSamples {
                in_window: window.len(),
            }));
        }
        match embed_task(
            bundle,
            &t.task_key,
            window,
            config.k,
            config.alpha,
            config.pooling,
            config.scope,
        ) {
            Ok(vector) => Ok(Ok(MetaEmbedding {
                task_key: t.task_key.clone(),
                vector,
                version: config.version.clone(),
                sample_count_used: window.len(),
            })),
            Err(e) if e.is_numerical() => Ok(Err(SkipReason::NonFinite(e.to_string()))),
            Err(e) => Err(e),
        }
    });
    let mut out = GenerationOutput {
        embeddings: Vec::new(),
        skipped: Vec::new(),
        as_of,
    };
    for (t, r) in all.iter().zip(results) {
        match r? {
            Ok(e) => out.embeddings.push(e),
            Err(reason) => {
                if let SkipReason::NonFinite(_) = reason {
                    log::warn!("task {}: {reason}", t.task_key);
                }
                out.skipped.push((t.task_key.clone(), reason));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(ts: i64) -> Sample {
        Sample {
            task_key: "t".into(),
            timestamp: ts,
            label: 0,
            meta_features: vec![],
            other_features: vec![],
        }
    }

    #[test]
    fn pooling_examples() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        assert_eq!(pool(&v, Pooling::Mean).unwrap(), vec![0.5, 1.0]);
        assert_eq!(pool(&v, Pooling::Max).unwrap(), vec![1.0, 2.0]);
        assert_eq!(pool(&v, Pooling::Latest).unwrap(), vec![0.0, 2.0]);
        let c = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(pool(&c, Pooling::Cos).unwrap(), vec![1.0, 0.0]);
        for mode in [Pooling::Latest, Pooling::Max, Pooling::Mean, Pooling::Cos] {
            assert_eq!(pool(&[vec![3.0, -1.0]], mode).unwrap(), vec![3.0, -1.0]);
        }
    }

    #[test]
    fn cos_negative_weights_floored() {
        let v = vec![vec![-1.0, 0.0], vec![1.0, 1.0], vec![1.0, 0.0]];
        let w = 1.0 / 2f64.sqrt();
        let expected = [(w + 1.0) / (w + 1.0), w / (w + 1.0)];
        let got = pool(&v, Pooling::Cos).unwrap();
        assert!((got[0] - expected[0]).abs() < 1e-15);
        assert!((got[1] - expected[1]).abs() < 1e-15);
    }

    #[test]
    fn cos_zero_latest_falls_back() {
        let v = vec![vec![1.0, 1.0], vec![0.0, 0.0]];
        assert_eq!(pool(&v, Pooling::Cos).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn pool_rejects_mismatch_and_empty() {
        assert!(pool(&[vec![1.0], vec![1.0, 2.0]], Pooling::Mean).is_err());
        assert!(pool(&[], Pooling::Mean).is_err());
    }

    #[test]
    fn window_boundaries() {
        let day = SECONDS_PER_DAY;
        let s: Vec<Sample> = [0, day, 2 * day, 3 * day].into_iter().map(sample).collect();
        let w = select_window(&s, 2, 3 * day);
        assert_eq!(w.iter().map(|x| x.timestamp).collect::<Vec<_>>(), vec![2 * day, 3 * day]);
        assert!(select_window(&s, 1, 10 * day).is_empty());
        assert_eq!(select_window(&s, 1, day).len(), 1);
        assert!(select_window(&s, 5, -1).is_empty());
    }

    #[test]
    fn version_validation() {
        assert!(validate_version("2024-02-29").is_ok());
        assert!(validate_version("2023-02-29").is_err());
        assert!(validate_version("2024-2-09").is_err());
        assert!(validate_version("yesterday").is_err());
        assert_eq!(date_of(1_700_000_000).unwrap(), "2023-11-14");
    }

    #[test]
    fn parse_names() {
        for p in ["latest", "max", "mean", "cos"] {
            assert_eq!(p.parse::<Pooling>().unwrap().to_string(), p);
        }
        assert!("median".parse::<Pooling>().is_err());
    }
}
