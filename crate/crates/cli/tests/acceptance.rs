//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --test acceptance`; append criterion numbers after
//! `--` to run a subset, e.g. `cargo test --test acceptance -- 4 7`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use limaml::data::{synthesize, SyntheticSpec, TaskCollection};
use limaml::embedgen::{generate_embeddings, EmbedGenConfig, Pooling};
use limaml::eval::*;
use limaml::numcore::adapt::meta_gradient_in_graph;
use limaml::numcore::*;
use limaml::serving::{Fallback, GlobalScorer, ScoreRequest, ScoreResponse};
use limaml::store::*;
use limaml::training::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bits(p: &ParamSet) -> Vec<u64> {
    p.flatten().iter().map(|v| v.to_bits()).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Batch {
    let x = Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap();
    Batch::new(x, (0..rows).map(|i| (i % 2) as f64).collect()).unwrap()
}

/// Gradient exactness against central finite differences.
fn criterion_1() -> Outcome {
    let started = Instant::now();
    let spec = MlpSpec::classifier(3, &[5], Activation::Tanh);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec.init_params(&mut rng);
        let support = random_batch(&mut rng, 6, 3);
        let query = random_batch(&mut rng, 4, 3);
        let shapes = params.shapes();
        let flat = params.flatten();
        for n in 1..=3 {
            let analytic = meta_gradient(&spec, &params, &support, &query, 0.4, n).unwrap().flatten();
            for (i, an) in analytic.iter().enumerate() {
                let at = |delta: f64| {
                    let mut f = flat.clone();
                    f[i] += delta;
                    let p = ParamSet::unflatten(&f, &shapes).unwrap();
                    let (adapted, _) = unrolled_adapt(&spec, &p, &support, 0.4, n).unwrap();
                    loss_gradient(&spec, &adapted, &query).unwrap().1
                };
                worst = worst.max(rel_err((at(h) - at(-h)) / (2.0 * h), *an));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        worst <= 1e-4 && secs < 60.0,
        format!("{} params, 50 seeds, n=1..3: max rel err {worst:.2e} (<= 1e-4), {secs:.1}s (< 60s)", spec.num_params()),
    )
}

fn half_square(g: &mut Graph, theta: Var, c: f64) -> Var {
    let c = g.constant(Tensor::scalar(c));
    let d = g.sub(theta, c);
    let sq = g.mul(d, d);
    g.scale(sq, 0.5)
}

/// Quadratic family closed form.
fn criterion_2() -> Outcome {
    let (theta0, c, c_prime) = (0.3, 1.0, 2.0);
    let mut worst: f64 = 0.0;
    for alpha in [0.1, 0.5, 0.9] {
        for n in 0..=5 {
            let mut p = ParamSet::new();
            p.insert("theta", Tensor::scalar(theta0)).unwrap();
            let mut g = Graph::new();
            let leaves = p.to_leaves(&mut g);
            let (grad, _) = meta_gradient_in_graph(
                &mut g,
                &leaves,
                alpha,
                n,
                |g, p, _| Ok(half_square(g, p.get("theta").unwrap(), c)),
                |g, p| Ok(half_square(g, p.get("theta").unwrap(), c_prime)),
            )
            .unwrap();
            let decay = (1.0f64 - alpha).powi(n as i32);
            let theta_n = c + decay * (theta0 - c);
            worst = worst.max((grad.get("theta").unwrap().item() - decay * (theta_n - c_prime)).abs());
        }
    }
    check(worst <= 1e-12, format!("n=0..5, alpha in {{0.1,0.5,0.9}}: max abs err {worst:.1e} (<= 1e-12)"))
}

struct Split {
    train: TaskCollection,
    prepared: TaskCollection,
    validation: TaskCollection,
    test: TaskCollection,
}

fn split(spec: &SyntheticSpec) -> Split {
    let (train, validation, test) = synthesize(spec).unwrap();
    let prepared = train.prepare_for_training(64, 0.75).unwrap();
    Split {
        train,
        prepared,
        validation,
        test,
    }
}

impl Split {
    fn cohorts(&self) -> Cohorts {
        Cohorts::split_at(25, &[&self.train, &self.validation, &self.test])
    }
}

fn small_split(seed: u64) -> Split {
    split(&SyntheticSpec {
        num_tasks: 80,
        min_samples: 6,
        max_samples: 40,
        seed,
        ..SyntheticSpec::default()
    })
}

/// Collapse identities.
fn criterion_3() -> Outcome {
    let d = small_split(3);
    let net = MlpSpec::classifier(8, &[8], Activation::Relu);
    let init = net.init_params(&mut ChaCha8Rng::seed_from_u64(4));
    let cfg = TrainConfig {
        inner_steps: 0,
        tasks_per_batch: 8,
        total_steps: 25,
        warmup_steps: 3,
        dropout: 0.2,
        seed: 9,
        ..TrainConfig::default()
    };
    let (m, rm) = maml_train(&d.prepared, &net, init.clone(), &cfg).unwrap();
    let (v, rv) = vanilla_train(&d.prepared.query_only(), &net, init, &cfg).unwrap();
    let same_training = bits(&m) == bits(&v)
        && rm.losses() == rv.losses()
        && rm.lr_trace() == rv.lr_trace()
        && rm.grad_norms() == rv.grad_norms();

    let arch = BundleArch::mlp(4, 4, &[8], 4, &[8], Activation::Relu, Wiring::default());
    let b0 = ModelBundle::init(arch, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let (bundle, _) = limaml_train(&d.prepared, &b0, &TrainConfig { inner_steps: 1, ..cfg.clone() }).unwrap();
    let k0 = EvalProtocol {
        k: 0,
        alpha: 0.3,
        ..EvalProtocol::default()
    };
    let none = EvalProtocol::no_fine_tune();
    let cohorts = d.cohorts();
    let mut same_reports = true;
    for model in [EvalModel::Bundle(&bundle), EvalModel::Network { spec: &net, params: &v }] {
        let a = evaluate(model, &k0, &d.validation, &d.test, &cohorts, 1).unwrap();
        let b = evaluate(model, &none, &d.validation, &d.test, &cohorts, 1).unwrap();
        same_reports &= a == b;
    }
    check(
        same_training && same_reports,
        format!(
            "maml(n=0) == vanilla(query) over {} steps: {same_training}; k=0 report == no-fine-tune report: {same_reports}",
            rm.steps.len()
        ),
    )
}

fn benchmark_config(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig {
        alpha: 0.3,
        beta: 0.01,
        total_steps: steps,
        tasks_per_batch: 32,
        warmup_steps: steps / 20,
        seed,
        ..TrainConfig::default()
    }
}

fn benchmark_arch() -> BundleArch {
    BundleArch::mlp(4, 4, &[16], 8, &[16], Activation::Relu, Wiring::default())
}

fn fine_tune_protocol(k: usize) -> EvalProtocol {
    EvalProtocol {
        alpha: 0.3,
        k,
        ..EvalProtocol::default()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Directional ordering of the five evaluation columns.
fn criterion_4() -> Outcome {
    let started = Instant::now();
    let net = MlpSpec::classifier(8, &[16], Activation::Relu);
    let names = ["vanilla-noft", "vanilla-ft", "maml-noft", "maml-ft", "limaml-ft"];
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for seed in 1..=5u64 {
        let d = split(&SyntheticSpec {
            num_tasks: 2000,
            min_samples: 8,
            max_samples: 64,
            scale: 3.0,
            interaction_scale: 0.5,
            seed,
            ..SyntheticSpec::default()
        });
        let cfg = benchmark_config(seed, 1000);
        let init = net.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        let (van, _) = vanilla_train(&d.prepared, &net, init.clone(), &cfg).unwrap();
        let (maml, _) = maml_train(&d.prepared, &net, init, &cfg).unwrap();
        let b0 = ModelBundle::init(benchmark_arch(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (bundle, _) = limaml_train(&d.prepared, &b0, &cfg).unwrap();
        let cohorts = d.cohorts();
        let ft = fine_tune_protocol(1);
        let nft = EvalProtocol::no_fine_tune();
        let runs = [
            (EvalModel::Network { spec: &net, params: &van }, &nft),
            (EvalModel::Network { spec: &net, params: &van }, &ft),
            (EvalModel::Network { spec: &net, params: &maml }, &nft),
            (EvalModel::Network { spec: &net, params: &maml }, &ft),
            (EvalModel::Bundle(&bundle), &ft),
        ];
        let mut line = format!("    seed {seed}:");
        for (i, (model, proto)) in runs.iter().enumerate() {
            let a = evaluate(*model, proto, &d.validation, &d.test, &cohorts, seed).unwrap().auc().unwrap();
            cols[i].push(a);
            line += &format!(" {}={a:.4}", names[i]);
        }
        println!("{line}");
    }
    let m: Vec<f64> = cols.iter().map(|c| mean(c)).collect();
    let gaps = [m[3] - m[1], m[1] - m[0], m[0] - m[2]];
    let limaml_gap = (m[4] - m[3]).abs();
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    check(
        gaps.iter().all(|g| *g >= 0.01) && limaml_gap <= 0.02 && minutes < 30.0,
        format!(
            "mean AUC over 5 seeds: maml-ft {:.4} > vanilla-ft {:.4} > vanilla-noft {:.4} > maml-noft {:.4}, gaps {:.4}/{:.4}/{:.4} (>= 0.01); |limaml-ft {:.4} - maml-ft| = {limaml_gap:.4} (<= 0.02); {minutes:.1} min (< 30)",
            m[3], m[1], m[0], m[2], gaps[0], gaps[1], gaps[2], m[4]
        ),
    )
}

/// Uplift on the smallest tasks.
fn criterion_5() -> Outcome {
    let net = MlpSpec::classifier(8, &[16], Activation::Relu);
    let cohort = CohortSpec {
        name: "at most 8 samples".into(),
        min_samples: 0,
        max_samples: Some(8),
    };
    let (mut base, mut ours) = (Vec::new(), Vec::new());
    for seed in 1..=5u64 {
        let d = split(&SyntheticSpec {
            num_tasks: 2000,
            min_samples: 4,
            max_samples: 32,
            scale: 2.5,
            interaction_scale: 0.5,
            seed,
            ..SyntheticSpec::default()
        });
        let cohorts = Cohorts::by_task_size(vec![cohort.clone()], &[&d.train, &d.validation, &d.test]);
        let cfg = benchmark_config(seed, 1000);
        let init = net.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        let (van, _) = vanilla_train(&d.prepared, &net, init, &cfg).unwrap();
        let b0 = ModelBundle::init(benchmark_arch(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (bundle, _) = limaml_train(&d.prepared, &b0, &cfg).unwrap();
        let v = evaluate(
            EvalModel::Network { spec: &net, params: &van },
            &EvalProtocol::no_fine_tune(),
            &d.validation,
            &d.test,
            &cohorts,
            seed,
        )
        .unwrap();
        let l = evaluate(EvalModel::Bundle(&bundle), &fine_tune_protocol(1), &d.validation, &d.test, &cohorts, seed).unwrap();
        let (vc, lc) = (v.cohort(&cohort.name).unwrap(), l.cohort(&cohort.name).unwrap());
        println!(
            "    seed {seed}: {} tasks, vanilla-noft {:.4}, limaml-ft {:.4}",
            vc.tasks,
            vc.auc.unwrap(),
            lc.auc.unwrap()
        );
        base.push(vc.auc.unwrap());
        ours.push(lc.auc.unwrap());
    }
    let gap = mean(&ours) - mean(&base);
    check(
        gap >= 0.01,
        format!("cohort <= 8 samples, mean over 5 seeds: limaml-ft {:.4} - vanilla-noft {:.4} = {gap:.4} (>= 0.01)", mean(&ours), mean(&base)),
    )
}

/// Inner-step sweep: cost grows with n, quality does not move.
fn criterion_6() -> Outcome {
    let d = split(&SyntheticSpec {
        num_tasks: 2000,
        scale: 3.0,
        interaction_scale: 0.5,
        seed: 1,
        ..SyntheticSpec::default()
    });
    let net = MlpSpec::classifier(8, &[16], Activation::Relu);
    let arch = benchmark_arch();
    let sweep = SweepSpec::new(SweepParam::InnerSteps, 1..=5, 5).unwrap();
    let table = run_sweep(
        &sweep,
        &benchmark_config(1, 500),
        &fine_tune_protocol(1),
        SweepInputs {
            train: &d.prepared,
            validation: &d.validation,
            test: &d.test,
            arch: &arch,
            baseline: &net,
        },
        &d.cohorts(),
    )
    .unwrap();
    for row in &table.rows {
        println!("    n={}: {:.0} ms (fastest of 5), AUC {:.4}", row.value, row.train_ms, row.test_auc.unwrap_or(f64::NAN));
    }
    let times: Vec<f64> = table.rows.iter().map(|r| r.train_ms).collect();
    let aucs: Vec<f64> = table.rows.iter().map(|r| r.test_auc.unwrap_or(f64::NAN)).collect();
    let increasing = times.windows(2).all(|w| w[1] > w[0]);
    let spread = aucs.iter().copied().fold(f64::MIN, f64::max) - aucs.iter().copied().fold(f64::MAX, f64::min);
    check(
        increasing && spread <= 0.005 && table.failures() == 0,
        format!("500 outer steps, k=n: wall time strictly increasing: {increasing}; AUC spread {spread:.4} (<= 0.005)"),
    )
}

/// Pooling on drifting tasks.
fn criterion_7() -> Outcome {
    let modes = [Pooling::Latest, Pooling::Max, Pooling::Mean, Pooling::Cos];
    let mut aucs: Vec<Vec<f64>> = vec![Vec::new(); modes.len()];
    for seed in 1..=3u64 {
        let d = split(&SyntheticSpec {
            num_tasks: 2000,
            scale: 1.0,
            interaction_scale: 0.5,
            drift: 6.0,
            seed,
            ..SyntheticSpec::default()
        });
        let b0 = ModelBundle::init(benchmark_arch(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (bundle, _) = limaml_train(&d.prepared, &b0, &benchmark_config(seed, 1000)).unwrap();
        let mut line = format!("    seed {seed}:");
        for (i, mode) in modes.iter().enumerate() {
            let proto = EvalProtocol {
                pooling: *mode,
                ..fine_tune_protocol(1)
            };
            let a = evaluate(EvalModel::Bundle(&bundle), &proto, &d.validation, &d.test, &d.cohorts(), seed)
                .unwrap()
                .auc()
                .unwrap();
            aucs[i].push(a);
            line += &format!(" {mode}={a:.4}");
        }
        println!("{line}");
    }
    let m: Vec<f64> = aucs.iter().map(|a| mean(a)).collect();
    check(
        m[1..].iter().all(|x| m[0] >= *x),
        format!("mean over 3 seeds: latest {:.4} >= max {:.4}, mean {:.4}, cos {:.4}", m[0], m[1], m[2], m[3]),
    )
}

/// Worker-count invariance and parallel speed-up.
fn criterion_8() -> Outcome {
    let d = split(&SyntheticSpec {
        num_tasks: 200,
        seed: 8,
        ..SyntheticSpec::default()
    });
    let b0 = ModelBundle::init(benchmark_arch(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let cfg = TrainConfig {
        tasks_per_batch: 64,
        total_steps: 15,
        warmup_steps: 2,
        inner_steps: 2,
        dropout: 0.1,
        seed: 8,
        ..TrainConfig::default()
    };
    let mut keys: Vec<String> = d.prepared.train_eligible().keys().take(64).map(String::from).collect();
    canonical_order(&mut keys);
    let sets: Vec<(String, SplitBatch, SplitBatch)> = keys
        .iter()
        .map(|k| {
            let t = d.prepared.get(k).unwrap();
            (k.clone(), SplitBatch::from_samples(t.support()).unwrap(), SplitBatch::from_samples(t.query()).unwrap())
        })
        .collect();
    let step = |workers: usize| {
        parallel_outer_step(&sets, workers, |(k, s, q)| {
            limaml_task_step(&b0.arch, &b0.meta, &b0.global, k, s, q, &cfg, 0).map(|r| r.outcome)
        })
        .unwrap()
    };
    let (g1, l1) = step(1);
    let mut same = true;
    for w in [2, 4] {
        let (g, l) = step(w);
        same &= bits(&g) == bits(&g1) && l == l1;
    }

    let trajectory = |workers: usize| {
        let c = TrainConfig { workers, ..cfg.clone() };
        let (b, r) = limaml_train(&d.prepared, &b0, &c).unwrap();
        let net = MlpSpec::classifier(8, &[8], Activation::Tanh);
        let (m, rm) = maml_train(&d.prepared, &net, net.init_params(&mut ChaCha8Rng::seed_from_u64(8)), &c).unwrap();
        (bits(&b.joint_params()), r.losses(), r.grad_norms(), bits(&m), rm.losses())
    };
    let t1 = trajectory(1);
    for w in [2, 4] {
        same &= trajectory(w) == t1;
    }

    let fastest = |workers: usize| {
        (0..5)
            .map(|_| {
                let t = Instant::now();
                step(workers);
                t.elapsed().as_secs_f64() * 1e3
            })
            .fold(f64::MAX, f64::min)
    };
    let (ms1, ms4) = (fastest(1), fastest(4));
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    check(
        same && ms4 < ms1,
        format!(
            "summed gradient and trajectories bitwise equal for workers 1/2/4: {same}; 64-task step {ms1:.1} ms (1 worker) vs {ms4:.1} ms (4 workers) on {cores} core(s)"
        ),
    )
}

/// Clipping and schedule units.
fn criterion_9() -> Outcome {
    let mut g = ParamSet::new();
    g.insert("g", Tensor::row(vec![3.0, 4.0])).unwrap();
    let clipped = clip_gradients(&g, 1.0).unwrap().flatten();
    let cfg = TrainConfig {
        beta: 0.01,
        warmup_steps: 50,
        total_steps: 1000,
        ..TrainConfig::default()
    };
    let (w, beta) = (cfg.warmup_steps, cfg.beta);
    let start = lr_schedule(0, &cfg);
    let peak = lr_schedule(w, &cfg);
    let left_limit = beta * w as f64 / w as f64;
    let jump = (peak - left_limit).abs();
    let ok = clipped == vec![0.6, 0.8] && start == 0.0 && peak == beta && jump <= 1e-12;
    check(
        ok,
        format!("clip([3,4], 1) = {clipped:?}; lr(0) = {start}; lr(warmup) = {peak} (beta {beta}); junction gap {jump:.1e}"),
    )
}

fn brute_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (mut twice, mut pairs) = (0u128, 0u128);
    for (i, si) in scores.iter().enumerate() {
        for (j, sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                twice += if si > sj {
                    2
                } else if si == sj {
                    1
                } else {
                    0
                };
            }
        }
    }
    (pairs > 0).then(|| twice as f64 / (2 * pairs) as f64)
}

/// Rank-sum AUC against pairwise counting.
fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut mismatches = 0;
    let mut defined = 0;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..60);
        let levels = rng.gen_range(1..12);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let fast = auc(&scores, &labels).unwrap();
        let slow = brute_auc(&scores, &labels);
        defined += usize::from(slow.is_some());
        if fast.map(f64::to_bits) != slow.map(f64::to_bits) {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("10000 instances with ties ({defined} with both classes): {mismatches} mismatches"))
}

/// Snapshot and checkpoint formats.
fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dim = 8;
    let records: Vec<(String, Vec<f32>)> = (0..200)
        .map(|i| (format!("user{i}|type{}", i % 3), (0..dim).map(|_| rng.gen_range(-3.0f32..3.0)).collect()))
        .collect();
    let snap = EmbeddingSnapshot::new("2024-05-01", dim, records.clone()).unwrap();
    let path = dir.path().join("s.lmes");
    write_snapshot(&snap, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = read_snapshot(&path).unwrap();
    let snapshot_exact = back == snap && back.encode() == bytes;

    let mut costs_ok = true;
    for (k, v) in records.iter().take(20) {
        let without: Vec<_> = records.iter().filter(|(key, _)| key != k).cloned().collect();
        let smaller = EmbeddingSnapshot::new("2024-05-01", dim, without).unwrap().encode().len();
        costs_ok &= bytes.len() - smaller == v.len() * 4 + k.len() + INDEX_ENTRY_OVERHEAD;
    }
    let key_bytes: usize = records.iter().map(|(k, _)| k.len()).sum();
    costs_ok &= bytes.len() == FIXED_OVERHEAD + records.len() * (dim * 4 + INDEX_ENTRY_OVERHEAD) + key_bytes;

    let mut rejected = 0;
    let mut attempts = 0;
    for pos in (0..bytes.len()).step_by(97) {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x01;
        attempts += 1;
        rejected += usize::from(EmbeddingSnapshot::decode(&bad, &path).is_err());
    }
    for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
        attempts += 1;
        rejected += usize::from(EmbeddingSnapshot::decode(&bytes[..cut], &path).is_err());
    }

    let bundle = ModelBundle::init(benchmark_arch(), &mut rng).unwrap();
    let created = CreationInfo {
        tool_version: "test".into(),
        algorithm: "limaml".into(),
        steps: 0,
        final_loss: None,
        meta_dim: 4,
        other_dim: 4,
    };
    let ckpt = Checkpoint::for_bundle(&bundle, &TrainConfig::default(), created);
    let cpath = dir.path().join("c.json");
    write_checkpoint(&ckpt, &cpath).unwrap();
    let loaded = read_checkpoint(&cpath).unwrap().bundle().unwrap();
    let checkpoint_exact = bits(&loaded.joint_params()) == bits(&bundle.joint_params());
    let text = std::fs::read_to_string(&cpath).unwrap();
    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, &text[..text.len() / 2]).unwrap();
    attempts += 1;
    rejected += usize::from(read_checkpoint(&broken).is_err());

    check(
        snapshot_exact && costs_ok && checkpoint_exact && rejected == attempts,
        format!(
            "snapshot round trip bitwise: {snapshot_exact}; per-record cost dim*4 + key + {INDEX_ENTRY_OVERHEAD} (header {FIXED_OVERHEAD}): {costs_ok}; checkpoint round trip bitwise: {checkpoint_exact}; corrupted files rejected {rejected}/{attempts}"
        ),
    )
}

/// Serving parity with the offline evaluation path.
fn criterion_12() -> Outcome {
    let d = split(&SyntheticSpec {
        num_tasks: 150,
        min_samples: 8,
        max_samples: 40,
        seed: 12,
        ..SyntheticSpec::default()
    });
    let b0 = ModelBundle::init(benchmark_arch(), &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let (bundle, _) = limaml_train(&d.prepared, &b0, &benchmark_config(12, 40)).unwrap();
    let history = d.validation.filter(|t| !t.task_key.ends_with('7'));
    let gen = generate_embeddings(
        &history,
        &bundle,
        &EmbedGenConfig {
            k: 1,
            alpha: 0.3,
            window_days: 100_000,
            version: "2024-06-30".into(),
            ..EmbedGenConfig::default()
        },
    )
    .unwrap();
    let snap = EmbeddingSnapshot::from_embeddings("2024-06-30", bundle.embedding_dim(), &gen.embeddings).unwrap();
    let report = evaluate(EvalModel::Bundle(&bundle), &fine_tune_protocol(1), &history, &d.test, &d.cohorts(), 12).unwrap();
    let fallback = snapshot_scores(&bundle, &snap, Fallback::Mean, &d.test).unwrap();
    let samples: Vec<_> = d.test.samples().cloned().collect();
    let expected: Vec<f64> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| if snap.lookup(&s.task_key).is_some() { report.predictions[i].score } else { fallback[i].score })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut input = String::new();
    let mut wanted = Vec::new();
    let mean_row = Tensor::row(snap.mean_vector());
    for i in 0..10_000 {
        let j = rng.gen_range(0..samples.len());
        let mut s = samples[j].clone();
        if i % 10 == 0 {
            s.task_key = format!("ghost{i}");
            wanted.push(bundle_scores(&bundle, &mean_row, std::slice::from_ref(&s)).unwrap()[0]);
        } else {
            wanted.push(expected[j]);
        }
        let req = ScoreRequest {
            task_key: s.task_key,
            meta_features: Some(s.meta_features),
            other_features: s.other_features,
        };
        input += &serde_json::to_string(&req).unwrap();
        input.push('\n');
    }
    let scorer = GlobalScorer::new(&bundle, snap, Fallback::Mean).unwrap();
    let mut out = Vec::new();
    let stats = scorer.batch_score(input.as_bytes(), &mut out, 4).unwrap();
    let served: Vec<ScoreResponse> = String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mismatches = served.iter().zip(&wanted).filter(|(r, w)| r.score.to_bits() != w.to_bits()).count();
    check(
        served.len() == 10_000 && mismatches == 0 && stats.errors == 0 && stats.fallbacks >= 1000,
        format!(
            "{} responses to 10000 requests, {mismatches} differ bitwise from the evaluation path, {} served via fallback, {} errors",
            served.len(),
            stats.fallbacks,
            stats.errors
        ),
    )
}

fn cli(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_limaml")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every subcommand reproduces its outputs from its manifest.
fn criterion_13() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let quick = ["--set", "total_steps=20", "--set", "tasks_per_batch=16", "--set", "warmup_steps=2"];
    cli(&["synthesize", "--out", p(&data), "--seed", "3", "--set", "num_tasks=80"])?;
    for alg in ["vanilla", "maml", "limaml"] {
        let mut args = vec!["train", "--algorithm", alg, "--data", p(&data)];
        let out = root.join(format!("{alg}.json"));
        args.extend(["--out", p(&out)]);
        args.extend(quick);
        cli(&args)?;
    }
    let snap = root.join("snap.lmes");
    let limaml = root.join("limaml.json");
    cli(&["embedgen", "--checkpoint", p(&limaml), "--data", p(&data), "--out", p(&snap), "--set", "window_days=100000"])?;
    let requests = root.join("requests.jsonl");
    std::fs::write(
        &requests,
        "{\"task_key\":\"task00001\",\"other_features\":[0.1,0.2,0.3,0.4]}\n{\"task_key\":\"nobody\",\"other_features\":[1,0,0,0]}\n",
    )
    .unwrap();
    let responses = root.join("responses.jsonl");
    cli(&["serve", "--checkpoint", p(&limaml), "--snapshot", p(&snap), "--input", p(&requests), "--output", p(&responses)])?;
    let eval = root.join("eval");
    let (van, maml) = (root.join("vanilla.json"), root.join("maml.json"));
    cli(&["eval", "--data", p(&data), "--out", p(&eval), "--vanilla", p(&van), "--maml", p(&maml), "--limaml", p(&limaml)])?;
    let sweep = root.join("sweep");
    cli(&[
        "sweep", "--data", p(&data), "--out", p(&sweep), "--param", "inner_steps", "--values", "1,2",
        "--set", "total_steps=4", "--set", "tasks_per_batch=8", "--set", "warmup_steps=1",
    ])?;
    let tsv = root.join("export.tsv");
    cli(&["export", "--snapshot", p(&snap), "--out", p(&tsv)])?;

    let manifests: Vec<(&str, PathBuf)> = vec![
        ("synthesize", data.join("manifest.json")),
        ("train vanilla", root.join("vanilla.manifest.json")),
        ("train maml", root.join("maml.manifest.json")),
        ("train limaml", root.join("limaml.manifest.json")),
        ("embedgen", root.join("snap.manifest.json")),
        ("serve", root.join("responses.manifest.json")),
        ("eval", eval.join("manifest.json")),
        ("sweep", sweep.join("manifest.json")),
        ("export", root.join("export.manifest.json")),
    ];
    let mut failures = Vec::new();
    let mut compared = 0;
    let mut skipped = Vec::new();
    for (name, manifest) in &manifests {
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(manifest).map_err(|e| format!("{name}: {e}"))?)
            .map_err(|e| e.to_string())?;
        let outputs = m["outputs"].as_object().ok_or(format!("{name}: no outputs"))?;
        let mut before = BTreeMap::new();
        for (key, o) in outputs {
            let path = PathBuf::from(o["path"].as_str().unwrap());
            let whole = o["sha256"].is_string() && o["excluded_columns"].as_array().is_none_or(|c| c.is_empty());
            if whole {
                before.insert(key.clone(), (path.clone(), std::fs::read(&path).unwrap()));
            } else {
                skipped.push(format!("{name}/{key}"));
            }
        }
        match cli(&["rerun", p(manifest)]) {
            Ok(out) => {
                let text = String::from_utf8_lossy(&out.stdout).to_string();
                if text.contains("DIFFERS") {
                    failures.push(format!("{name}: {text}"));
                }
            }
            Err(e) => failures.push(e),
        }
        for (key, (path, bytes)) in before {
            compared += 1;
            if std::fs::read(&path).unwrap() != bytes {
                failures.push(format!("{name}/{key} bytes changed"));
            }
        }
    }
    check(
        failures.is_empty(),
        format!(
            "{} manifests re-run, {compared} outputs byte-identical, digests excluding wall-clock content for {}{}",
            manifests.len(),
            skipped.join(", "),
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join("; ")) }
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 13] = [
        (1, "gradient exactness", criterion_1),
        (2, "closed-form oracle", criterion_2),
        (3, "collapse identities", criterion_3),
        (4, "directional column ordering", criterion_4),
        (5, "small-data uplift", criterion_5),
        (6, "inner-step sweep", criterion_6),
        (7, "pooling under drift", criterion_7),
        (8, "parallel determinism", criterion_8),
        (9, "clipping and schedule", criterion_9),
        (10, "AUC oracle", criterion_10),
        (11, "storage formats", criterion_11),
        (12, "serving parity", criterion_12),
        (13, "reproducibility", criterion_13),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, title, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} {status} [{title}, {secs:.1}s] {detail}");
        if outcome.is_err() {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
