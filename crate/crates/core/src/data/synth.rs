//! Synthetic heterogeneous tasks.
//!
//! Each task is an entity with a profile vector that is observed (noisily)
//! through the meta features and that moves along a per-task direction over
//! the task's timeline. Labels follow a logistic model shared by all tasks
//! plus two hidden per-task components: an intercept and a random sign on
//! the first other-feature coefficient. Neither is visible in the features,
//! so only task-level adaptation can recover them.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Sample, TaskCollection, TaskDataset};
use crate::error::{Error, Result};
use crate::numcore::sigmoid;
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_tasks: usize,
    pub min_samples: usize,
    pub max_samples: usize,
    /// Standard deviation of the hidden per-task intercept.
    pub scale: f64,
    /// Magnitude of the hidden per-task coefficient on the first other feature.
    pub interaction_scale: f64,
    pub meta_dim: usize,
    pub other_dim: usize,
    /// How far the entity profile and intercept move over the timeline.
    pub drift: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    /// Standard deviation of the observation noise on meta features.
    pub meta_noise: f64,
    /// First timestamp (epoch seconds).
    pub start_timestamp: i64,
    /// Mean gap between consecutive samples of a task, in seconds.
    pub mean_gap_seconds: i64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_tasks: 200,
            min_samples: 8,
            max_samples: 64,
            scale: 1.5,
            interaction_scale: 1.5,
            meta_dim: 4,
            other_dim: 4,
            drift: 0.0,
            seed: 0,
            validation_fraction: 0.2,
            test_fraction: 0.2,
            meta_noise: 0.1,
            start_timestamp: 1_700_000_000,
            mean_gap_seconds: 86_400,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::Config("num_tasks must be at least 1".into()));
        }
        if self.min_samples == 0 || self.max_samples < self.min_samples {
            return Err(Error::Config(format!(
                "need 1 <= min_samples <= max_samples, got {}..{}",
                self.min_samples, self.max_samples
            )));
        }
        if self.meta_dim == 0 || self.other_dim == 0 {
            return Err(Error::Config("feature dimensions must be at least 1".into()));
        }
        let f = self.validation_fraction + self.test_fraction;
        if self.validation_fraction < 0.0 || self.test_fraction < 0.0 || f >= 1.0 {
            return Err(Error::Config(
                "validation and test fractions must be non-negative and sum below 1".into(),
            ));
        }
        if !(self.scale >= 0.0
            && self.interaction_scale >= 0.0
            && self.drift >= 0.0
            && self.meta_noise >= 0.0)
        {
            return Err(Error::Config("scales, drift and noise must be non-negative".into()));
        }
        if self.mean_gap_seconds < 1 {
            return Err(Error::Config("mean_gap_seconds must be positive".into()));
        }
        Ok(())
    }
}

/// Hidden generating parameters of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskLatent {
    pub intercept: f64,
    pub sign: f64,
    pub profile: Vec<f64>,
    pub profile_drift: Vec<f64>,
    pub intercept_drift: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: TaskCollection,
    pub validation: TaskCollection,
    pub test: TaskCollection,
    /// Per task, the Bernoulli probability of every sample in time order
    /// (train, then validation, then test).
    pub probabilities: BTreeMap<String, Vec<f64>>,
    pub latents: BTreeMap<String, TaskLatent>,
    pub shared_meta_weights: Vec<f64>,
    pub shared_other_weights: Vec<f64>,
}

fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn synthesize(spec: &SyntheticSpec) -> Result<(TaskCollection, TaskCollection, TaskCollection)> {
    let d = synthesize_detailed(spec)?;
    Ok((d.train, d.validation, d.test))
}

pub fn synthesize_detailed(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (p, q) = (spec.meta_dim, spec.other_dim);
    let mut shared = seeds::stream(spec.seed, &[0]);
    let w_meta: Vec<f64> = normals(&mut shared, p)
        .into_iter()
        .map(|v| v / (p as f64).sqrt())
        .collect();
    let w_other: Vec<f64> = normals(&mut shared, q)
        .into_iter()
        .map(|v| v / (q as f64).sqrt())
        .collect();

    let width = (spec.num_tasks.max(1) - 1).to_string().len().max(5);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    let mut probabilities = BTreeMap::new();
    let mut latents = BTreeMap::new();

    for i in 0..spec.num_tasks {
        let key = format!("task{i:0width$}");
        let mut rng = seeds::stream(spec.seed, &[1, i as u64]);
        let latent = TaskLatent {
            intercept: spec.scale * rng.sample::<f64, _>(StandardNormal),
            sign: if rng.gen::<bool>() { 1.0 } else { -1.0 },
            profile: normals(&mut rng, p),
            profile_drift: normals(&mut rng, p)
                .into_iter()
                .map(|v| v / (p as f64).sqrt())
                .collect(),
            intercept_drift: rng.sample::<f64, _>(StandardNormal),
        };
        let count = rng.gen_range(spec.min_samples..=spec.max_samples);

        let mut ts = spec.start_timestamp + rng.gen_range(0..spec.mean_gap_seconds);
        let mut samples = Vec::with_capacity(count);
        let mut probs = Vec::with_capacity(count);
        for j in 0..count {
            if j > 0 {
                let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                ts += 1 + (-(u.ln()) * spec.mean_gap_seconds as f64) as i64;
            }
            let tau = if count > 1 {
                j as f64 / (count - 1) as f64
            } else {
                0.0
            };
            let state: Vec<f64> = latent
                .profile
                .iter()
                .zip(&latent.profile_drift)
                .map(|(z, d)| z + spec.drift * tau * d)
                .collect();
            let meta: Vec<f64> = state
                .iter()
                .map(|s| s + spec.meta_noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let other = normals(&mut rng, q);
            let logit = dot(&w_meta, &state)
                + dot(&w_other, &other)
                + latent.intercept
                + spec.drift * (tau - 0.5) * latent.intercept_drift
                + spec.interaction_scale * latent.sign * other[0];
            let prob = sigmoid(logit);
            let label = u8::from(rng.gen::<f64>() < prob);
            probs.push(prob);
            samples.push(Sample {
                task_key: key.clone(),
                timestamp: ts,
                label,
                meta_features: meta,
                other_features: other,
            });
        }

        let n_test = split_count(count, count, spec.test_fraction);
        let n_val = split_count(count, count - n_test, spec.validation_fraction);
        let n_train = count - n_test - n_val;
        let mut rest = samples;
        let tail_test = rest.split_off(n_train + n_val);
        let tail_val = rest.split_off(n_train);
        if !rest.is_empty() {
            train.push(TaskDataset::new(key.clone(), rest));
        }
        if !tail_val.is_empty() {
            validation.push(TaskDataset::new(key.clone(), tail_val));
        }
        if !tail_test.is_empty() {
            test.push(TaskDataset::new(key.clone(), tail_test));
        }
        probabilities.insert(key.clone(), probs);
        latents.insert(key, latent);
    }

    Ok(SyntheticData {
        train: TaskCollection::from_tasks(train, p, q)?,
        validation: TaskCollection::from_tasks(validation, p, q)?,
        test: TaskCollection::from_tasks(test, p, q)?,
        probabilities,
        latents,
        shared_meta_weights: w_meta,
        shared_other_weights: w_other,
    })
}

/// `round(total * fraction)` taken from the `available` tail, at least one
/// when the fraction is positive, always leaving one sample behind.
fn split_count(total: usize, available: usize, fraction: f64) -> usize {
    if fraction <= 0.0 || available < 2 {
        return 0;
    }
    ((total as f64 * fraction).round() as usize).clamp(1, available - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec {
            num_tasks: 20,
            seed: 11,
            drift: 0.5,
            ..Default::default()
        };
        assert_eq!(synthesize_detailed(&spec).unwrap(), synthesize_detailed(&spec).unwrap());
        let other = SyntheticSpec { seed: 12, ..spec.clone() };
        assert_ne!(synthesize(&spec).unwrap().0, synthesize(&other).unwrap().0);
    }

    #[test]
    fn splits_are_time_ordered() {
        let spec = SyntheticSpec {
            num_tasks: 30,
            min_samples: 3,
            max_samples: 40,
            ..Default::default()
        };
        let (tr, va, te) = synthesize(&spec).unwrap();
        for t in tr.tasks() {
            let v = va.get(&t.task_key).unwrap();
            let s = te.get(&t.task_key).unwrap();
            assert!(t.samples().last().unwrap().timestamp < v.samples()[0].timestamp);
            assert!(v.samples().last().unwrap().timestamp < s.samples()[0].timestamp);
            assert_eq!(t.len() + v.len() + s.len() >= 3, true);
        }
    }

    #[test]
    fn sizes_within_bounds() {
        let spec = SyntheticSpec {
            num_tasks: 50,
            min_samples: 8,
            max_samples: 64,
            ..Default::default()
        };
        let d = synthesize_detailed(&spec).unwrap();
        for probs in d.probabilities.values() {
            assert!((8..=64).contains(&probs.len()));
        }
        assert_eq!(d.train.len(), 50);
        assert_eq!(d.test.len(), 50);
    }

    #[test]
    fn rejects_inverted_range() {
        let spec = SyntheticSpec {
            min_samples: 10,
            max_samples: 5,
            ..Default::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }
}
