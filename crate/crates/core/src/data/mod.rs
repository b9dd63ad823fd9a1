//! Samples grouped into tasks, chronological support/query splits, and a
//! synthetic generator of heterogeneous tasks.

mod ingest;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Batch, Tensor};

pub use ingest::{export_delimited, export_jsonl, ingest, ingest_str, Format};
pub use synth::{synthesize, synthesize_detailed, SyntheticData, SyntheticSpec};

/// Default number of most-recent samples kept per task.
pub const DEFAULT_SAMPLE_CAP: usize = 64;

/// Default fraction of each task's history assigned to the support set.
pub const DEFAULT_SUPPORT_FRACTION: f64 = 0.75;

/// Default cohort boundary; tasks with exactly this many samples count as large.
pub const DEFAULT_COHORT_THRESHOLD: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub task_key: String,
    pub timestamp: i64,
    pub label: u8,
    pub meta_features: Vec<f64>,
    pub other_features: Vec<f64>,
}

impl Sample {
    pub fn label_f64(&self) -> f64 {
        f64::from(self.label)
    }

    /// `[meta, other]`, the input of a single full network.
    pub fn joined_features(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.meta_features.len() + self.other_features.len());
        v.extend_from_slice(&self.meta_features);
        v.extend_from_slice(&self.other_features);
        v
    }
}

/// All samples of one task in ascending timestamp order.
///
/// `samples[..support_end]` is the support set and the remainder the query
/// set. Freshly built tasks are unsplit (`support_end == len`).
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_key: String,
    samples: Vec<Sample>,
    support_end: usize,
}

impl TaskDataset {
    /// Sorts `samples` by timestamp (stable) and leaves the task unsplit.
    pub fn new(task_key: impl Into<String>, mut samples: Vec<Sample>) -> Self {
        samples.sort_by_key(|s| s.timestamp);
        let support_end = samples.len();
        Self {
            task_key: task_key.into(),
            samples,
            support_end,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn support_end(&self) -> usize {
        self.support_end
    }

    pub fn support(&self) -> &[Sample] {
        &self.samples[..self.support_end]
    }

    pub fn query(&self) -> &[Sample] {
        &self.samples[self.support_end..]
    }

    pub fn latest(&self) -> Option<&Sample> {
        self.samples.last()
    }

    /// Both sets non-empty.
    pub fn is_train_eligible(&self) -> bool {
        self.support_end > 0 && self.support_end < self.samples.len()
    }

    /// Chronological split: the first `floor(len * fraction)` samples become
    /// support, clamped so both sets are non-empty when `len >= 2`.
    ///
    /// Tasks with fewer than two samples stay unsplit and are not
    /// train-eligible.
    pub fn split_support_query(&self, support_fraction: f64) -> Result<Self> {
        if !(support_fraction > 0.0 && support_fraction < 1.0) {
            return Err(Error::Config(format!(
                "support fraction {support_fraction} outside (0, 1)"
            )));
        }
        let len = self.samples.len();
        let support_end = if len < 2 {
            len
        } else {
            let raw = (len as f64 * support_fraction).floor() as usize;
            raw.clamp(1, len - 1)
        };
        Ok(Self {
            task_key: self.task_key.clone(),
            samples: self.samples.clone(),
            support_end,
        })
    }

    /// Keeps only the `cap` most recent samples. The result is unsplit.
    pub fn cap_samples(&self, cap: usize) -> Self {
        let cap = cap.max(1);
        let start = self.samples.len().saturating_sub(cap);
        let samples = self.samples[start..].to_vec();
        let support_end = samples.len();
        Self {
            task_key: self.task_key.clone(),
            samples,
            support_end,
        }
    }

    /// A copy holding only the given samples (already chronological).
    pub fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self::new(self.task_key.clone(), samples)
    }
}

/// Free-function form of [`TaskDataset::split_support_query`].
pub fn split_support_query(task: &TaskDataset, support_fraction: f64) -> Result<TaskDataset> {
    task.split_support_query(support_fraction)
}

/// Free-function form of [`TaskDataset::cap_samples`].
pub fn cap_samples(task: &TaskDataset, cap: usize) -> TaskDataset {
    task.cap_samples(cap)
}

/// Which features feed a single full network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureView {
    /// `[meta, other]`
    Joined,
    Meta,
    Other,
}

/// Builds a batch from `samples` using the chosen feature view.
pub fn batch_of(samples: &[Sample], view: FeatureView) -> Result<Batch> {
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| match view {
            FeatureView::Joined => s.joined_features(),
            FeatureView::Meta => s.meta_features.clone(),
            FeatureView::Other => s.other_features.clone(),
        })
        .collect();
    let cols = rows.first().map_or(0, Vec::len);
    let features = Tensor::from_rows(&rows, cols)?;
    Batch::new(features, samples.iter().map(Sample::label_f64).collect())
}

/// Tasks keyed by task key, all sharing feature dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskCollection {
    tasks: BTreeMap<String, TaskDataset>,
    meta_dim: usize,
    other_dim: usize,
}

impl TaskCollection {
    pub fn empty(meta_dim: usize, other_dim: usize) -> Self {
        Self {
            tasks: BTreeMap::new(),
            meta_dim,
            other_dim,
        }
    }

    /// Groups samples by task key, validating labels and feature lengths.
    pub fn from_samples(samples: Vec<Sample>, meta_dim: usize, other_dim: usize) -> Result<Self> {
        let mut grouped: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
        for s in samples {
            validate_sample(&s, meta_dim, other_dim)?;
            grouped.entry(s.task_key.clone()).or_default().push(s);
        }
        let tasks = grouped
            .into_iter()
            .map(|(k, v)| (k.clone(), TaskDataset::new(k, v)))
            .collect();
        Ok(Self {
            tasks,
            meta_dim,
            other_dim,
        })
    }

    pub fn from_tasks(
        tasks: impl IntoIterator<Item = TaskDataset>,
        meta_dim: usize,
        other_dim: usize,
    ) -> Result<Self> {
        let mut out = Self::empty(meta_dim, other_dim);
        for t in tasks {
            for s in t.samples() {
                validate_sample(s, meta_dim, other_dim)?;
            }
            if out.tasks.insert(t.task_key.clone(), t).is_some() {
                return Err(Error::Data("duplicate task key".into()));
            }
        }
        Ok(out)
    }

    pub fn meta_dim(&self) -> usize {
        self.meta_dim
    }

    pub fn other_dim(&self) -> usize {
        self.other_dim
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&TaskDataset> {
        self.tasks.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.tasks.keys().map(String::as_str)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskDataset> {
        self.tasks.values()
    }

    pub fn total_samples(&self) -> usize {
        self.tasks.values().map(TaskDataset::len).sum()
    }

    /// Every sample, task by task in key order.
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.tasks.values().flat_map(|t| t.samples().iter())
    }

    pub fn map_tasks(&self, f: impl Fn(&TaskDataset) -> TaskDataset) -> Self {
        Self {
            tasks: self
                .tasks
                .iter()
                .map(|(k, t)| (k.clone(), f(t)))
                .collect(),
            meta_dim: self.meta_dim,
            other_dim: self.other_dim,
        }
    }

    pub fn filter(&self, keep: impl Fn(&TaskDataset) -> bool) -> Self {
        Self {
            tasks: self
                .tasks
                .iter()
                .filter(|(_, t)| keep(t))
                .map(|(k, t)| (k.clone(), t.clone()))
                .collect(),
            meta_dim: self.meta_dim,
            other_dim: self.other_dim,
        }
    }

    /// Caps every task and splits it chronologically.
    pub fn prepare_for_training(&self, cap: usize, support_fraction: f64) -> Result<Self> {
        let mut tasks = BTreeMap::new();
        for (k, t) in &self.tasks {
            tasks.insert(k.clone(), t.cap_samples(cap).split_support_query(support_fraction)?);
        }
        Ok(Self {
            tasks,
            meta_dim: self.meta_dim,
            other_dim: self.other_dim,
        })
    }

    /// Train-eligible tasks only.
    pub fn train_eligible(&self) -> Self {
        self.filter(TaskDataset::is_train_eligible)
    }

    /// Each train-eligible task reduced to its query samples (unsplit).
    pub fn query_only(&self) -> Self {
        let eligible = self.train_eligible();
        eligible.map_tasks(|t| t.with_samples(t.query().to_vec()))
    }
}

fn validate_sample(s: &Sample, meta_dim: usize, other_dim: usize) -> Result<()> {
    if s.label > 1 {
        return Err(Error::Data(format!("label {} is not binary", s.label)));
    }
    if s.meta_features.len() != meta_dim || s.other_features.len() != other_dim {
        return Err(Error::Data(format!(
            "task {}: feature lengths {}+{} differ from {}+{}",
            s.task_key,
            s.meta_features.len(),
            s.other_features.len(),
            meta_dim,
            other_dim
        )));
    }
    if s
        .meta_features
        .iter()
        .chain(&s.other_features)
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite(format!("features of task {}", s.task_key)));
    }
    Ok(())
}

/// Partitions tasks by sample count: `count < threshold` is small, the rest large.
pub fn cohort_slice(tasks: &TaskCollection, threshold: usize) -> (TaskCollection, TaskCollection) {
    let threshold = threshold.max(1);
    (
        tasks.filter(|t| t.len() < threshold),
        tasks.filter(|t| t.len() >= threshold),
    )
}
