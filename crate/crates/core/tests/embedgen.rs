use limaml::data::{synthesize, Sample, SyntheticSpec, TaskCollection, TaskDataset};
use limaml::embedgen::*;
use limaml::numcore::mlp::{kernel_name, offset_name};
use limaml::numcore::{sigmoid, Activation, MlpSpec, ParamSet, Tensor};
use limaml::training::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data(seed: u64) -> TaskCollection {
    let spec = SyntheticSpec {
        num_tasks: 40,
        min_samples: 4,
        max_samples: 30,
        meta_dim: 3,
        other_dim: 2,
        seed,
        drift: 1.0,
        ..SyntheticSpec::default()
    };
    synthesize(&spec).unwrap().0
}

fn bundle(seed: u64) -> ModelBundle {
    let arch = BundleArch::mlp(3, 2, &[5], 4, &[6], Activation::Tanh, Wiring::default());
    ModelBundle::init(arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn wide_window() -> EmbedGenConfig {
    EmbedGenConfig {
        window_days: 100_000,
        version: "2024-05-01".into(),
        ..EmbedGenConfig::default()
    }
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn identity_meta_block_without_steps_returns_latest_meta_features() {
    let tasks = data(1);
    let arch = BundleArch {
        meta: MetaBlockArch::Mlp {
            spec: MlpSpec::encoder(3, &[], 3, Activation::Identity),
        },
        global: MlpSpec::classifier(5, &[4], Activation::Relu),
        embedding_dim: 3,
        meta_dim: 3,
        other_dim: 2,
        wiring: Wiring::default(),
    };
    let mut meta = ParamSet::new();
    meta.insert(kernel_name(0), Tensor::identity(3)).unwrap();
    meta.insert(offset_name(0), Tensor::zeros(1, 3)).unwrap();
    let global = arch.global.init_params(&mut ChaCha8Rng::seed_from_u64(2));
    let b = ModelBundle::new(arch, meta, global).unwrap();
    let out = generate_embeddings(&tasks, &b, &EmbedGenConfig { k: 0, ..wide_window() }).unwrap();
    assert_eq!(out.embeddings.len(), tasks.len());
    for e in &out.embeddings {
        let latest = tasks.get(&e.task_key).unwrap().latest().unwrap();
        let expected: Vec<f32> = latest.meta_features.iter().map(|v| *v as f32).collect();
        assert_eq!(e.vector, expected);
    }
}

#[test]
fn zero_steps_is_the_shared_meta_block_on_the_latest_sample() {
    let tasks = data(2);
    let b = bundle(3);
    let out = generate_embeddings(&tasks, &b, &EmbedGenConfig { k: 0, ..wide_window() }).unwrap();
    for e in &out.embeddings {
        let latest = tasks.get(&e.task_key).unwrap().latest().unwrap();
        let x = Tensor::row(latest.meta_features.clone());
        let expected: Vec<f32> = b
            .arch
            .meta_embed_infer(&b.meta, &x)
            .unwrap()
            .into_data()
            .into_iter()
            .map(|v| v as f32)
            .collect();
        assert_eq!(e.vector, expected);
        assert_eq!(e.version, "2024-05-01");
    }
}

#[test]
fn one_step_on_scalar_meta_block_matches_hand_computation() {
    let (w, c) = (0.7, -0.2);
    let (u, v, d) = (1.3, -0.4, 0.1);
    let alpha = 0.5;
    let arch = BundleArch {
        meta: MetaBlockArch::Mlp {
            spec: MlpSpec::encoder(1, &[], 1, Activation::Identity),
        },
        global: MlpSpec::classifier(2, &[], Activation::Identity),
        embedding_dim: 1,
        meta_dim: 1,
        other_dim: 1,
        wiring: Wiring::default(),
    };
    let scalar = |x: f64| Tensor::from_rows(&[vec![x]], 1).unwrap();
    let mut meta = ParamSet::new();
    meta.insert(kernel_name(0), scalar(w)).unwrap();
    meta.insert(offset_name(0), scalar(c)).unwrap();
    let mut global = ParamSet::new();
    global
        .insert(kernel_name(0), Tensor::from_rows(&[vec![u], vec![v]], 1).unwrap())
        .unwrap();
    global.insert(offset_name(0), scalar(d)).unwrap();
    let b = ModelBundle::new(arch, meta, global).unwrap();

    let rows = [(0.5, 1.0, 1u8), (-1.0, 0.3, 0), (2.0, -0.7, 1)];
    let samples: Vec<Sample> = rows
        .iter()
        .enumerate()
        .map(|(i, (m, o, y))| Sample {
            task_key: "t".into(),
            timestamp: 100 + i as i64,
            label: *y,
            meta_features: vec![*m],
            other_features: vec![*o],
        })
        .collect();

    // Mean BCE of sigmoid(u * (w m + c) + v o + d); dL/dz = p - y.
    let n = rows.len() as f64;
    let (mut gw, mut gc) = (0.0, 0.0);
    for (m, o, y) in rows {
        let p = sigmoid(u * (w * m + c) + v * o + d);
        let r = p - f64::from(y);
        gw += r * u * m / n;
        gc += r * u / n;
    }
    let (w1, c1) = (w - alpha * gw, c - alpha * gc);
    let expected = (w1 * rows[2].0 + c1) as f32;

    let got = embed_task(&b, "t", &samples, 1, alpha, Pooling::Latest, FineTuneScope::FullNetwork).unwrap();
    assert_eq!(got.len(), 1);
    assert!(
        (f64::from(got[0]) - f64::from(expected)).abs() <= f64::from(expected.abs()) * 1e-6,
        "{} vs {expected}",
        got[0]
    );
}

#[test]
fn generation_leaves_bundle_untouched_and_is_reproducible() {
    let tasks = data(4);
    let b = bundle(5);
    let before = b.clone();
    let cfg = EmbedGenConfig {
        k: 3,
        pooling: Pooling::Cos,
        ..wide_window()
    };
    let a = generate_embeddings(&tasks, &b, &cfg).unwrap();
    assert_eq!(b, before);
    let again = generate_embeddings(&tasks, &b, &cfg).unwrap();
    let wide = generate_embeddings(&tasks, &b, &EmbedGenConfig { workers: 3, ..cfg }).unwrap();
    assert_eq!(a.embeddings.len(), tasks.len());
    for ((x, y), z) in a.embeddings.iter().zip(&again.embeddings).zip(&wide.embeddings) {
        assert_eq!(x.vector.len(), b.embedding_dim());
        assert!(x.vector.iter().all(|v| v.is_finite()));
        assert_eq!(bits(&x.vector), bits(&y.vector));
        assert_eq!(bits(&x.vector), bits(&z.vector));
    }
}

#[test]
fn adaptation_moves_embeddings() {
    let tasks = data(6);
    let b = bundle(7);
    let k0 = generate_embeddings(&tasks, &b, &EmbedGenConfig { k: 0, ..wide_window() }).unwrap();
    let k2 = generate_embeddings(
        &tasks,
        &b,
        &EmbedGenConfig {
            k: 2,
            alpha: 0.5,
            ..wide_window()
        },
    )
    .unwrap();
    let moved = k0
        .embeddings
        .iter()
        .zip(&k2.embeddings)
        .filter(|(a, b)| a.vector != b.vector)
        .count();
    assert_eq!(moved, tasks.len());
}

fn task_at(key: &str, stamps: &[i64]) -> TaskDataset {
    let samples = stamps
        .iter()
        .map(|t| Sample {
            task_key: key.into(),
            timestamp: *t,
            label: u8::from(t % 2 == 0),
            meta_features: vec![0.1, 0.2, 0.3],
            other_features: vec![1.0, -1.0],
        })
        .collect();
    TaskDataset::new(key, samples)
}

#[test]
fn tasks_outside_window_or_below_minimum_are_skipped() {
    let day = SECONDS_PER_DAY;
    let tasks = TaskCollection::from_tasks(
        vec![
            task_at("old", &[0, day]),
            task_at("recent", &[99 * day, 100 * day]),
            task_at("single", &[100 * day - 5]),
        ],
        3,
        2,
    )
    .unwrap();
    let cfg = EmbedGenConfig {
        window_days: 10,
        min_samples: 2,
        ..EmbedGenConfig::default()
    };
    let out = generate_embeddings(&tasks, &bundle(1), &cfg).unwrap();
    assert_eq!(out.as_of, 100 * day);
    let keys: Vec<&str> = out.embeddings.iter().map(|e| e.task_key.as_str()).collect();
    assert_eq!(keys, ["recent"]);
    assert_eq!(out.embeddings[0].sample_count_used, 2);
    assert_eq!(
        out.skipped,
        vec![
            ("old".to_string(), SkipReason::TooFewSamples { in_window: 0 }),
            ("single".to_string(), SkipReason::TooFewSamples { in_window: 1 }),
        ]
    );
}

#[test]
fn mismatched_feature_dims_are_rejected() {
    let tasks = TaskCollection::from_tasks(vec![task_at("a", &[1, 2])], 3, 2).unwrap();
    let arch = BundleArch::mlp(2, 2, &[3], 2, &[3], Activation::Relu, Wiring::default());
    let b = ModelBundle::init(arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(generate_embeddings(&tasks, &b, &EmbedGenConfig::default()).is_err());
}

#[test]
fn bad_configs_are_rejected() {
    let tasks = data(1);
    let b = bundle(1);
    for cfg in [
        EmbedGenConfig {
            window_days: 0,
            ..EmbedGenConfig::default()
        },
        EmbedGenConfig {
            min_samples: 0,
            ..EmbedGenConfig::default()
        },
        EmbedGenConfig {
            version: "2024-13-01".into(),
            ..EmbedGenConfig::default()
        },
    ] {
        assert!(generate_embeddings(&tasks, &b, &cfg).is_err());
    }
}

#[test]
fn id_embedding_generation_uses_each_task_row() {
    let tasks = data(8);
    let keys: Vec<String> = tasks.keys().map(String::from).collect();
    let arch = BundleArch {
        meta: MetaBlockArch::id_embedding(keys, 3),
        global: MlpSpec::classifier(5, &[4], Activation::Relu),
        embedding_dim: 3,
        meta_dim: 3,
        other_dim: 2,
        wiring: Wiring::default(),
    };
    let b = ModelBundle::init(arch, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let out = generate_embeddings(&tasks, &b, &EmbedGenConfig { k: 0, ..wide_window() }).unwrap();
    for e in &out.embeddings {
        let row = b.task_meta(&e.task_key);
        let (_, t) = row.iter().next().unwrap();
        let expected: Vec<f32> = t.data().iter().map(|v| *v as f32).collect();
        assert_eq!(e.vector, expected);
    }
}

proptest! {
    #[test]
    fn window_matches_linear_filter(
        mut stamps in proptest::collection::vec(0i64..2_000_000, 0..40),
        window in 1u32..20,
        as_of in 0i64..2_500_000,
    ) {
        stamps.sort_unstable();
        let t = task_at("k", &stamps);
        let got: Vec<i64> = select_window(t.samples(), window, as_of).iter().map(|s| s.timestamp).collect();
        let start = as_of - i64::from(window) * SECONDS_PER_DAY;
        let expected: Vec<i64> = stamps.iter().copied().filter(|s| *s > start && *s <= as_of).collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn pooled_vectors_stay_in_the_hull(
        vectors in (1usize..5).prop_flat_map(|d| proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, d), 1..8)),
    ) {
        let dim = vectors[0].len();
        let lo: Vec<f64> = (0..dim).map(|j| vectors.iter().map(|v| v[j]).fold(f64::INFINITY, f64::min)).collect();
        let hi: Vec<f64> = (0..dim).map(|j| vectors.iter().map(|v| v[j]).fold(f64::NEG_INFINITY, f64::max)).collect();
        for mode in [Pooling::Latest, Pooling::Max, Pooling::Mean, Pooling::Cos] {
            let p = pool(&vectors, mode).unwrap();
            prop_assert_eq!(p.len(), dim);
            for j in 0..dim {
                prop_assert!(p[j] >= lo[j] - 1e-9 && p[j] <= hi[j] + 1e-9);
            }
        }
        prop_assert_eq!(pool(&vectors, Pooling::Max).unwrap(), hi);
        prop_assert_eq!(&pool(&vectors, Pooling::Latest).unwrap(), vectors.last().unwrap());
        prop_assert_eq!(&pool(&vectors[vectors.len() - 1..], Pooling::Cos).unwrap(), vectors.last().unwrap());
    }
}
