//! One-parameter hyperparameter sweeps over LiMAML training.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{csv_err, evaluate, Cohorts, EvalModel, EvalProtocol};
use crate::data::TaskCollection;
use crate::embedgen::Pooling;
use crate::error::{Error, Result};
use crate::numcore::MlpSpec;
use crate::training::{limaml_train, vanilla_train, BundleArch, ModelBundle, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    InnerSteps,
    Dropout,
    TaskLr,
    GlobalLr,
    Pooling,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "inner_steps" => SweepParam::InnerSteps,
            "dropout" => SweepParam::Dropout,
            "task_lr" => SweepParam::TaskLr,
            "global_lr" => SweepParam::GlobalLr,
            "pooling" => SweepParam::Pooling,
            other => {
                return Err(Error::Config(format!(
                    "unknown sweep parameter `{other}` (expected inner_steps|dropout|task_lr|global_lr|pooling)"
                )))
            }
        })
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::InnerSteps => "inner_steps",
            SweepParam::Dropout => "dropout",
            SweepParam::TaskLr => "task_lr",
            SweepParam::GlobalLr => "global_lr",
            SweepParam::Pooling => "pooling",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<String>,
    pub replicates: usize,
}

impl SweepSpec {
    pub fn new(param: SweepParam, values: impl IntoIterator<Item = impl ToString>, replicates: usize) -> Result<Self> {
        let spec = Self {
            param,
            values: values.into_iter().map(|v| v.to_string()).collect(),
            replicates,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() < 2 {
            return Err(Error::Config("a sweep needs at least two values".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("a sweep needs at least one replicate".into()));
        }
        let probe = (TrainConfig::default(), EvalProtocol::default());
        for v in &self.values {
            let (mut c, mut p) = probe.clone();
            apply(self.param, v, &mut c, &mut p)?;
            c.validate()?;
        }
        Ok(())
    }
}

/// Run seed for a value index and replicate.
pub fn sweep_seed(base: u64, value_index: usize, replicate: usize) -> u64 {
    base.wrapping_mul(10007)
        .wrapping_add(value_index as u64 * 101)
        .wrapping_add(replicate as u64)
}

fn apply(param: SweepParam, value: &str, config: &mut TrainConfig, protocol: &mut EvalProtocol) -> Result<()> {
    let bad = |e: String| Error::Config(format!("sweep value `{value}` for {param}: {e}"));
    let real = || value.parse::<f64>().map_err(|e| bad(e.to_string()));
    match param {
        SweepParam::InnerSteps => {
            config.inner_steps = value
                .parse()
                .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
            protocol.k = config.inner_steps;
        }
        SweepParam::Dropout => config.dropout = real()?,
        SweepParam::TaskLr => {
            config.alpha = real()?;
            protocol.alpha = config.alpha;
        }
        SweepParam::GlobalLr => config.beta = real()?,
        SweepParam::Pooling => protocol.pooling = value.parse::<Pooling>()?,
    }
    Ok(())
}

/// Datasets and models shared by every run of a sweep.
#[derive(Clone, Copy, Debug)]
pub struct SweepInputs<'a> {
    /// Training tasks with support/query splits applied.
    pub train: &'a TaskCollection,
    pub validation: &'a TaskCollection,
    pub test: &'a TaskCollection,
    pub arch: &'a BundleArch,
    /// Network of the vanilla no-fine-tune baseline.
    pub baseline: &'a MlpSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub replicates: usize,
    /// Fastest training run over the replicates, in milliseconds.
    pub train_ms: f64,
    pub train_time_increase_pct: Option<f64>,
    pub test_auc: Option<f64>,
    pub test_auc_std: Option<f64>,
    pub test_auc_gain_pct: Option<f64>,
    pub test_auc_gain_abs: Option<f64>,
    pub failures: Vec<String>,
}

/// Baseline row first, then one row per swept value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub baseline: SweepRow,
    pub rows: Vec<SweepRow>,
}

fn min_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NAN, f64::min)
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

fn train_bundle(inputs: &SweepInputs<'_>, config: &TrainConfig) -> Result<ModelBundle> {
    let init = ModelBundle::init(inputs.arch.clone(), &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    limaml_train(inputs.train, &init, config).map(|(b, _)| b)
}

/// Trains LiMAML once per value and replicate and evaluates each run in
/// `protocol` against a vanilla no-fine-tune baseline trained per
/// replicate. Failed runs are recorded and the sweep continues.
pub fn run_sweep(
    spec: &SweepSpec,
    base: &TrainConfig,
    protocol: &EvalProtocol,
    inputs: SweepInputs<'_>,
    cohorts: &Cohorts,
) -> Result<SweepTable> {
    spec.validate()?;
    let mut base_aucs = Vec::new();
    let mut base_ms = Vec::new();
    let mut base_failures = Vec::new();
    for r in 0..spec.replicates {
        let mut config = base.clone();
        config.seed = sweep_seed(base.seed, 0, r);
        let started = Instant::now();
        let outcome = (|| {
            let init = inputs.baseline.init_params(&mut ChaCha8Rng::seed_from_u64(config.seed));
            let (params, _) = vanilla_train(inputs.train, inputs.baseline, init, &config)?;
            let ms = started.elapsed().as_secs_f64() * 1e3;
            let model = EvalModel::Network {
                spec: inputs.baseline,
                params: &params,
            };
            let report = evaluate(model, &EvalProtocol::no_fine_tune(), inputs.validation, inputs.test, cohorts, config.seed)?;
            Ok::<_, Error>((ms, report.auc()))
        })();
        match outcome {
            Ok((ms, Some(a))) => {
                base_ms.push(ms);
                base_aucs.push(a);
            }
            Ok((_, None)) => base_failures.push(format!("replicate {r}: undefined AUC")),
            Err(e) => base_failures.push(format!("replicate {r}: {e}")),
        }
    }
    let (base_auc, base_std) = mean_std(&base_aucs);
    let baseline = SweepRow {
        value: "baseline".into(),
        replicates: spec.replicates,
        train_ms: min_of(&base_ms),
        train_time_increase_pct: None,
        test_auc: base_auc,
        test_auc_std: base_std,
        test_auc_gain_pct: None,
        test_auc_gain_abs: None,
        failures: base_failures,
    };

    // Replicate-major order spreads machine load evenly across values.
    let mut acc: Vec<(Vec<f64>, Vec<f64>, Vec<String>)> = vec![Default::default(); spec.values.len()];
    for r in 0..spec.replicates {
        for (vi, value) in spec.values.iter().enumerate() {
            let (aucs, times, failures) = &mut acc[vi];
            let mut config = base.clone();
            let mut proto = protocol.clone();
            apply(spec.param, value, &mut config, &mut proto)?;
            config.seed = sweep_seed(base.seed, vi, r);
            let started = Instant::now();
            let outcome = train_bundle(&inputs, &config).and_then(|bundle| {
                let ms = started.elapsed().as_secs_f64() * 1e3;
                let report = evaluate(
                    EvalModel::Bundle(&bundle),
                    &proto,
                    inputs.validation,
                    inputs.test,
                    cohorts,
                    config.seed,
                )?;
                Ok((ms, report.auc()))
            });
            match outcome {
                Ok((ms, Some(a))) => {
                    times.push(ms);
                    aucs.push(a);
                }
                Ok((_, None)) => failures.push(format!("replicate {r}: undefined AUC")),
                Err(e) => failures.push(format!("replicate {r}: {e}")),
            }
        }
    }
    let mut rows: Vec<SweepRow> = Vec::with_capacity(spec.values.len());
    for (value, (aucs, times, failures)) in spec.values.iter().zip(acc) {
        let (auc, std) = mean_std(&aucs);
        let gain = match (auc, base_auc) {
            (Some(a), Some(b)) => Some(super::auc_gain(a, b)),
            _ => None,
        };
        rows.push(SweepRow {
            value: value.clone(),
            replicates: spec.replicates,
            train_ms: min_of(&times),
            train_time_increase_pct: None,
            test_auc: auc,
            test_auc_std: std,
            test_auc_gain_pct: gain.map(|g| g.relative_pct),
            test_auc_gain_abs: gain.map(|g| g.absolute),
            failures,
        });
    }
    let first_ms = rows[0].train_ms;
    for row in &mut rows {
        if first_ms.is_finite() && row.train_ms.is_finite() {
            row.train_time_increase_pct = Some((row.train_ms - first_ms) / first_ms * 100.0);
        }
    }
    Ok(SweepTable {
        param: spec.param,
        baseline,
        rows,
    })
}

impl SweepTable {
    pub fn all_rows(&self) -> impl Iterator<Item = &SweepRow> {
        std::iter::once(&self.baseline).chain(&self.rows)
    }

    pub fn failures(&self) -> usize {
        self.all_rows().map(|r| r.failures.len()).sum()
    }

    /// Columns: parameter, value, replicates, train_ms,
    /// train_time_increase_pct, test_auc, test_auc_std, test_auc_gain_pct,
    /// test_auc_gain_abs, failures. Empty cells mean undefined.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "parameter",
            "value",
            "replicates",
            "train_ms",
            "train_time_increase_pct",
            "test_auc",
            "test_auc_std",
            "test_auc_gain_pct",
            "test_auc_gain_abs",
            "failures",
        ])
        .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in self.all_rows() {
            w.write_record([
                self.param.to_string(),
                r.value.clone(),
                r.replicates.to_string(),
                if r.train_ms.is_finite() { r.train_ms.to_string() } else { String::new() },
                opt(r.train_time_increase_pct),
                opt(r.test_auc),
                opt(r.test_auc_std),
                opt(r.test_auc_gain_pct),
                opt(r.test_auc_gain_abs),
                r.failures.len().to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn render_text(&self) -> String {
        let mut s = format!(
            "{:<10} | {:>10} | {:>14} | {:>8} | {:>8} | {:>9}\n",
            self.param.to_string(),
            "train ms",
            "time increase",
            "AUC",
            "gain",
            "failures"
        );
        for r in self.all_rows() {
            let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:+.2}%"));
            s += &format!(
                "{:<10} | {:>10.1} | {:>14} | {:>8} | {:>8} | {:>9}\n",
                r.value,
                r.train_ms,
                pct(r.train_time_increase_pct),
                r.test_auc.map_or("undef".to_string(), |a| format!("{a:.4}")),
                pct(r.test_auc_gain_pct),
                r.failures.len()
            );
        }
        s
    }
}
