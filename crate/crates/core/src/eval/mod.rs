//! Metrics, the fine-tune / no-fine-tune evaluation protocol, cohort
//! reports and hyperparameter sweeps.

pub mod sweep;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{batch_of, FeatureView, Sample, TaskCollection};
use crate::embedgen::{embed_task, FineTuneScope, Pooling};
use crate::error::{Error, Result};
use crate::numcore::{MlpSpec, ParamSet, Tensor};
use crate::serving::Fallback;
use crate::store::EmbeddingSnapshot;
use crate::training::{fine_tune, map_ordered, ModelBundle, SplitBatch};

pub use sweep::{run_sweep, sweep_seed, SweepInputs, SweepParam, SweepRow, SweepSpec, SweepTable};

/// Area under the ROC curve by rank sum, ties sharing the average rank.
///
/// Returns `Ok(None)` when only one class is present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores".into()));
    }
    if let Some(l) = labels.iter().find(|l| **l > 1) {
        return Err(Error::InvalidLabel(f64::from(*l)));
    }
    let pos = labels.iter().filter(|l| **l == 1).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum, so tied average ranks stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j share the average (i + 1 + j) / 2.
        let twice_avg = (i + 1 + j) as u128;
        let positives = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += twice_avg * positives;
        i = j;
    }
    let twice_u = twice_rank_sum - pos * (pos + 1);
    Ok(Some(twice_u as f64 / (2 * pos * neg) as f64))
}

/// Relative (percent of baseline) and absolute AUC differences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gain {
    pub relative_pct: f64,
    pub absolute: f64,
}

pub fn auc_gain(auc: f64, baseline: f64) -> Gain {
    Gain {
        relative_pct: (auc - baseline) / baseline * 100.0,
        absolute: auc - baseline,
    }
}

/// A trained model to evaluate.
#[derive(Clone, Copy, Debug)]
pub enum EvalModel<'a> {
    Network { spec: &'a MlpSpec, params: &'a ParamSet },
    Bundle(&'a ModelBundle),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub fine_tune: bool,
    pub k: usize,
    pub alpha: f64,
    /// Pooling of per-sample meta embeddings (two-block models only).
    pub pooling: Pooling,
    pub scope: FineTuneScope,
    pub workers: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            fine_tune: true,
            k: 1,
            alpha: 0.1,
            pooling: Pooling::Latest,
            scope: FineTuneScope::FullNetwork,
            workers: 1,
        }
    }
}

impl EvalProtocol {
    pub fn no_fine_tune() -> Self {
        Self {
            fine_tune: false,
            ..Self::default()
        }
    }

    fn steps(&self) -> usize {
        if self.fine_tune {
            self.k
        } else {
            0
        }
    }
}

/// Tasks whose test-sample count lies in `[min_samples, max_samples]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub name: String,
    pub min_samples: usize,
    pub max_samples: Option<usize>,
}

impl CohortSpec {
    pub fn contains(&self, count: usize) -> bool {
        count >= self.min_samples && self.max_samples.map_or(true, |m| count <= m)
    }

    /// `count < threshold` and `count >= threshold`.
    pub fn split_at(threshold: usize) -> Vec<CohortSpec> {
        let threshold = threshold.max(1);
        vec![
            CohortSpec {
                name: format!("less than {threshold} samples"),
                min_samples: 0,
                max_samples: Some(threshold - 1),
            },
            CohortSpec {
                name: format!("{threshold} or more samples"),
                min_samples: threshold,
                max_samples: None,
            },
        ]
    }
}

/// Cohort definitions plus the size of each task used to assign it.
///
/// Tasks absent from `sizes` are sized by their test-sample count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Cohorts {
    pub specs: Vec<CohortSpec>,
    pub sizes: BTreeMap<String, usize>,
}

impl Cohorts {
    pub fn by_test_count(specs: Vec<CohortSpec>) -> Self {
        Self {
            specs,
            sizes: BTreeMap::new(),
        }
    }

    /// Sizes each task by its total sample count across `collections`.
    pub fn by_task_size(specs: Vec<CohortSpec>, collections: &[&TaskCollection]) -> Self {
        let mut sizes = BTreeMap::new();
        for c in collections {
            for t in c.tasks() {
                *sizes.entry(t.task_key.clone()).or_default() += t.len();
            }
        }
        Self { specs, sizes }
    }

    /// The small/large split at `threshold` over total task size.
    pub fn split_at(threshold: usize, collections: &[&TaskCollection]) -> Self {
        Self::by_task_size(CohortSpec::split_at(threshold), collections)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub task_key: String,
    pub timestamp: i64,
    pub score: f64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortResult {
    pub name: String,
    pub auc: Option<f64>,
    pub tasks: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: CohortResult,
    pub cohorts: Vec<CohortResult>,
    /// Cohorts whose AUC is undefined (one class only).
    pub undefined: usize,
    /// Tasks evaluated without adaptation in fine-tune mode because they
    /// had no validation samples.
    pub unadapted_tasks: usize,
    pub seed: u64,
    /// Test predictions in task-key, then chronological order.
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn auc(&self) -> Option<f64> {
        self.overall.auc
    }

    pub fn cohort(&self, name: &str) -> Option<&CohortResult> {
        self.cohorts.iter().find(|c| c.name == name)
    }

    pub fn scores(&self) -> Vec<f64> {
        self.predictions.iter().map(|p| p.score).collect()
    }

    /// Report over the given tasks only, with the same cohort layout.
    pub fn restricted_to(&self, keys: &[&str], cohorts: &Cohorts) -> Result<EvalReport> {
        let preds: Vec<Prediction> = self
            .predictions
            .iter()
            .filter(|p| keys.contains(&p.task_key.as_str()))
            .cloned()
            .collect();
        build_report(preds, cohorts, self.unadapted_tasks, self.seed)
    }
}

fn cohort_result(name: &str, preds: &[&Prediction]) -> Result<CohortResult> {
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let labels: Vec<u8> = preds.iter().map(|p| p.label).collect();
    let mut keys: Vec<&str> = preds.iter().map(|p| p.task_key.as_str()).collect();
    keys.dedup();
    Ok(CohortResult {
        name: name.to_string(),
        auc: auc(&scores, &labels)?,
        tasks: keys.len(),
        samples: preds.len(),
    })
}

fn build_report(predictions: Vec<Prediction>, cohorts: &Cohorts, unadapted: usize, seed: u64) -> Result<EvalReport> {
    let mut per_task: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &predictions {
        *per_task.entry(p.task_key.as_str()).or_default() += 1;
    }
    for (k, n) in per_task.iter_mut() {
        if let Some(size) = cohorts.sizes.get(*k) {
            *n = *size;
        }
    }
    let all: Vec<&Prediction> = predictions.iter().collect();
    let overall = cohort_result("all tasks", &all)?;
    let mut results = Vec::with_capacity(cohorts.specs.len());
    for c in &cohorts.specs {
        let members: Vec<&Prediction> = predictions
            .iter()
            .filter(|p| c.contains(per_task[p.task_key.as_str()]))
            .collect();
        results.push(cohort_result(&c.name, &members)?);
    }
    let undefined =
        usize::from(overall.auc.is_none()) + results.iter().filter(|c| c.auc.is_none()).count();
    Ok(EvalReport {
        overall,
        cohorts: results,
        undefined,
        unadapted_tasks: unadapted,
        seed,
        predictions,
    })
}

fn predictions_for(samples: &[Sample], scores: Vec<f64>) -> Vec<Prediction> {
    samples
        .iter()
        .zip(scores)
        .map(|(s, score)| Prediction {
            task_key: s.task_key.clone(),
            timestamp: s.timestamp,
            score,
            label: s.label,
        })
        .collect()
}

/// Global-block probabilities for `samples` with one embedding per row.
pub fn bundle_scores(bundle: &ModelBundle, embeddings: &Tensor, samples: &[Sample]) -> Result<Vec<f64>> {
    let b = SplitBatch::from_samples(samples)?;
    bundle
        .arch
        .global_probabilities(&bundle.global, embeddings, &b.meta, &b.other)
}

fn f32_row(v: &[f32], rows: usize) -> Tensor {
    Tensor::row(v.iter().map(|x| f64::from(*x)).collect()).broadcast_rows(rows)
}

/// Per-sample meta embeddings under the shared meta parameters.
fn unadapted_embeddings(bundle: &ModelBundle, key: &str, samples: &[Sample]) -> Result<Tensor> {
    let b = SplitBatch::from_samples(samples)?;
    let e = bundle.arch.meta_embed_infer(&bundle.task_meta(key), &b.meta)?;
    Ok(e.map(|x| f64::from(x as f32)))
}

/// Scores each test task of a trained model under `protocol`.
///
/// Fine-tuning starts from copies of the trained parameters and uses the
/// task's validation samples. Two-block models fine-tune only the meta
/// block and score with the pooled embedding, through the same code path
/// as embedding generation; with no fine-tuning the embedding comes from
/// the shared meta parameters on the same validation samples.
pub fn evaluate(
    model: EvalModel<'_>,
    protocol: &EvalProtocol,
    validation: &TaskCollection,
    test: &TaskCollection,
    cohorts: &Cohorts,
    seed: u64,
) -> Result<EvalReport> {
    if protocol.workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    let tasks: Vec<_> = test.tasks().filter(|t| !t.is_empty()).collect();
    let k = protocol.steps();
    let results = map_ordered(&tasks, protocol.workers, |t| {
        let val = validation.get(&t.task_key).filter(|v| !v.is_empty());
        let scores = match model {
            EvalModel::Network { spec, params } => {
                let x = batch_of(t.samples(), FeatureView::Joined)?.features;
                match val {
                    Some(v) if k > 0 => {
                        let b = batch_of(v.samples(), FeatureView::Joined)?;
                        let adapted = fine_tune(spec, params, &b, protocol.alpha, k)?;
                        spec.infer(&adapted, &x)?.into_data()
                    }
                    _ => spec.infer(params, &x)?.into_data(),
                }
            }
            EvalModel::Bundle(bundle) => {
                let emb = match val {
                    Some(v) => {
                        let e = embed_task(
                            bundle,
                            &t.task_key,
                            v.samples(),
                            k,
                            protocol.alpha,
                            protocol.pooling,
                            protocol.scope,
                        )?;
                        f32_row(&e, t.len())
                    }
                    None => unadapted_embeddings(bundle, &t.task_key, t.samples())?,
                };
                bundle_scores(bundle, &emb, t.samples())?
            }
        };
        let unadapted = protocol.fine_tune && k > 0 && val.is_none();
        Ok((predictions_for(t.samples(), scores), unadapted))
    });
    let mut predictions = Vec::new();
    let mut unadapted = 0;
    for r in results {
        let (p, u) = r?;
        predictions.extend(p);
        unadapted += usize::from(u);
    }
    build_report(predictions, cohorts, unadapted, seed)
}

/// Test-set probabilities of a two-block model using stored embeddings,
/// with the serving fallback for keys absent from the snapshot.
pub fn snapshot_scores(
    bundle: &ModelBundle,
    snapshot: &EmbeddingSnapshot,
    fallback: Fallback,
    test: &TaskCollection,
) -> Result<Vec<Prediction>> {
    let fallback_vec: Vec<f64> = match fallback {
        Fallback::Zero => vec![0.0; snapshot.dim()],
        Fallback::Mean => snapshot.mean_vector(),
    };
    let mut out = Vec::new();
    for t in test.tasks().filter(|t| !t.is_empty()) {
        let emb = match snapshot.lookup(&t.task_key) {
            Some(v) => f32_row(v, t.len()),
            None => Tensor::row(fallback_vec.clone()).broadcast_rows(t.len()),
        };
        out.extend(predictions_for(t.samples(), bundle_scores(bundle, &emb, t.samples())?));
    }
    Ok(out)
}

/// Several evaluated columns compared against the first one.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub columns: Vec<(String, EvalReport)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonCell {
    pub column: String,
    pub cohort: String,
    pub tasks: usize,
    pub samples: usize,
    pub auc: Option<f64>,
    pub gain_pct: Option<f64>,
    pub gain_abs: Option<f64>,
}

impl ComparisonTable {
    pub fn cells(&self) -> Vec<ComparisonCell> {
        let Some((_, base)) = self.columns.first() else {
            return Vec::new();
        };
        let base_rows: Vec<&CohortResult> = std::iter::once(&base.overall).chain(&base.cohorts).collect();
        let mut out = Vec::new();
        for (name, report) in &self.columns {
            let rows = std::iter::once(&report.overall).chain(&report.cohorts);
            for (row, b) in rows.zip(&base_rows) {
                let gain = match (row.auc, b.auc) {
                    (Some(a), Some(bb)) => Some(auc_gain(a, bb)),
                    _ => None,
                };
                out.push(ComparisonCell {
                    column: name.clone(),
                    cohort: row.name.clone(),
                    tasks: row.tasks,
                    samples: row.samples,
                    auc: row.auc,
                    gain_pct: gain.map(|g| g.relative_pct),
                    gain_abs: gain.map(|g| g.absolute),
                });
            }
        }
        out
    }

    /// Cohorts as rows, columns as columns; the first column is the baseline.
    pub fn render_text(&self) -> String {
        let cells = self.cells();
        let cohorts: Vec<String> = {
            let mut seen = Vec::new();
            for c in &cells {
                if !seen.contains(&c.cohort) {
                    seen.push(c.cohort.clone());
                }
            }
            seen
        };
        let width = cohorts.iter().map(String::len).max().unwrap_or(0).max(6);
        let col_w = self
            .columns
            .iter()
            .map(|(n, _)| n.len())
            .max()
            .unwrap_or(0)
            .max(18);
        let mut s = format!("{:<width$}", "cohort");
        for (n, _) in &self.columns {
            s += &format!(" | {n:>col_w$}");
        }
        s.push('\n');
        for cohort in &cohorts {
            s += &format!("{cohort:<width$}");
            for (i, (n, _)) in self.columns.iter().enumerate() {
                let c = cells
                    .iter()
                    .find(|c| &c.column == n && &c.cohort == cohort)
                    .expect("cell");
                let text = match (c.auc, c.gain_pct) {
                    (None, _) => "undefined".to_string(),
                    (Some(a), _) if i == 0 => format!("{a:.4} baseline"),
                    (Some(a), Some(g)) => format!("{a:.4} {g:+.2}%"),
                    (Some(a), None) => format!("{a:.4}"),
                };
                s += &format!(" | {text:>col_w$}");
            }
            s.push('\n');
        }
        s
    }

    /// Columns: column, cohort, tasks, samples, auc, gain_pct, gain_abs.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["column", "cohort", "tasks", "samples", "auc", "gain_pct", "gain_abs"])
            .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for c in self.cells() {
            w.write_record([
                c.column.clone(),
                c.cohort.clone(),
                c.tasks.to_string(),
                c.samples.to_string(),
                opt(c.auc),
                opt(c.gain_pct),
                opt(c.gain_abs),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("csv: {other:?}")),
    }
}
