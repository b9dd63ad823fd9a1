//! Subcommand implementations.

use std::fs;
use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Instant;

use limaml::data::{export_delimited, ingest, synthesize, Format, SyntheticSpec, TaskCollection};
use limaml::embedgen::{date_of, generate_embeddings, EmbedGenConfig, FineTuneScope, Pooling};
use limaml::eval::{
    evaluate, run_sweep, Cohorts, ComparisonTable, EvalModel, EvalProtocol, EvalReport, SweepInputs, SweepParam,
    SweepSpec,
};
use limaml::numcore::{Activation, MlpSpec, ParamSet};
use limaml::serving::{Fallback, GlobalScorer};
use limaml::store::{
    read_checkpoint, read_snapshot, write_atomic, Checkpoint, CreationInfo, EmbeddingSnapshot,
};
use limaml::training::{
    limaml_train, maml_train, parse_key_values, vanilla_train, BundleArch, MetaBlockArch, ModelBundle, TrainConfig,
    TrainReport, Wiring, TRAIN_CONFIG_KEYS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CliError;
use crate::manifest::{absolute, sibling, ManifestBuilder, RunManifest, TOOL_VERSION};
use crate::settings::{defaults_of, Common, Settings};

pub type CmdResult = Result<Option<RunManifest>, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Algorithm {
    Vanilla,
    Maml,
    Limaml,
}

impl Algorithm {
    fn name(self) -> &'static str {
        match self {
            Algorithm::Vanilla => "vanilla",
            Algorithm::Maml => "maml",
            Algorithm::Limaml => "limaml",
        }
    }
}

fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
    items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn path_arg(flag: &str, path: &Path) -> [String; 2] {
    [flag.to_string(), absolute(path).display().to_string()]
}

fn common_defaults() -> Vec<(String, String)> {
    pairs(&[("seed", "0"), ("workers", "1")])
}

const DATA_DEFAULTS: &[(&str, &str)] = &[("key_columns", "task_key")];

const ARCH_DEFAULTS: &[(&str, &str)] = &[
    ("hidden", "16"),
    ("meta_block", "mlp"),
    ("meta_hidden", "16"),
    ("embedding_dim", "8"),
    ("global_hidden", "16"),
    ("activation", "relu"),
    ("meta_to_global", "false"),
    ("sample_cap", "64"),
    ("support_fraction", "0.75"),
];

fn train_defaults() -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = parse_key_values(&TrainConfig::default().to_key_values())
        .expect("default config renders")
        .into_iter()
        .collect();
    out.extend(pairs(ARCH_DEFAULTS));
    out.extend(pairs(DATA_DEFAULTS));
    out
}

fn train_config(settings: &Settings) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    for key in TRAIN_CONFIG_KEYS {
        cfg.set(key, settings.str(key))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn activation(settings: &Settings) -> Result<Activation, CliError> {
    let raw = settings.str("activation");
    serde_json::from_value(serde_json::Value::String(raw.to_string())).map_err(|_| {
        CliError::usage(format!("bad value `{raw}` for `activation` (relu, tanh, sigmoid or identity)"))
    })
}

fn network_spec(settings: &Settings, data: &TaskCollection) -> Result<MlpSpec, CliError> {
    let spec = MlpSpec::classifier(data.meta_dim() + data.other_dim(), &settings.list::<usize>("hidden")?, activation(settings)?);
    spec.validate()?;
    Ok(spec)
}

fn bundle_arch(settings: &Settings, data: &TaskCollection) -> Result<BundleArch, CliError> {
    let embedding_dim: usize = settings.parse("embedding_dim")?;
    let mut arch = BundleArch::mlp(
        data.meta_dim(),
        data.other_dim(),
        &settings.list::<usize>("meta_hidden")?,
        embedding_dim,
        &settings.list::<usize>("global_hidden")?,
        activation(settings)?,
        Wiring {
            meta_to_global: settings.parse("meta_to_global")?,
        },
    );
    match settings.str("meta_block") {
        "mlp" => {}
        "id_embedding" => arch.meta = MetaBlockArch::id_embedding(data.keys().map(String::from), embedding_dim),
        other => {
            return Err(CliError::usage(format!(
                "bad value `{other}` for `meta_block` (mlp or id_embedding)"
            )))
        }
    }
    arch.validate()?;
    Ok(arch)
}

fn in_file(path: &Path, e: limaml::Error) -> CliError {
    let mut c = CliError::from(e);
    c.message = format!("{}: {}", path.display(), c.message);
    c
}

fn checkpoint_at(path: &Path) -> Result<Checkpoint, CliError> {
    read_checkpoint(path).map_err(|e| in_file(path, e))
}

fn snapshot_at(path: &Path) -> Result<EmbeddingSnapshot, CliError> {
    read_snapshot(path).map_err(|e| in_file(path, e))
}

fn split_path(data: &Path, split: &str) -> PathBuf {
    if data.is_dir() {
        data.join(format!("{split}.csv"))
    } else {
        data.to_path_buf()
    }
}

fn load(path: &Path, settings: &Settings) -> Result<TaskCollection, CliError> {
    let keys: Vec<String> = settings.list("key_columns")?;
    ingest(path, Format::from_path(path), &keys)
        .map_err(|e| CliError::runtime(format!("cannot load {}: {e}", path.display())))
}

/// Union of several collections with equal feature dimensions.
fn merge(parts: &[TaskCollection]) -> Result<TaskCollection, CliError> {
    let first = parts.first().ok_or_else(|| CliError::usage("no data splits selected".into()))?;
    let samples = parts.iter().flat_map(|c| c.samples().cloned()).collect();
    Ok(TaskCollection::from_samples(samples, first.meta_dim(), first.other_dim())?)
}

fn prepared(settings: &Settings, raw: &TaskCollection) -> Result<TaskCollection, CliError> {
    Ok(raw.prepare_for_training(settings.parse("sample_cap")?, settings.parse("support_fraction")?)?)
}

fn write_output(mb: &mut ManifestBuilder, name: &str, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes)?;
    mb.output(name, path, bytes);
    Ok(())
}

pub fn cmd_synthesize(common: &Common, out: &Path) -> CmdResult {
    let base = SyntheticSpec::default();
    let mut defaults = defaults_of(&base);
    defaults.push(("workers".into(), "1".into()));
    let settings = Settings::resolve(defaults, &[], common, &[])?;
    let spec: SyntheticSpec = settings.build(&base)?;
    spec.validate()?;
    let (train, validation, test) = synthesize(&spec)?;
    fs::create_dir_all(out)?;
    let mut mb = ManifestBuilder::start("synthesize", &settings);
    mb.command(path_arg("--out", out).to_vec(), &settings);
    for (name, coll) in [("train", &train), ("validation", &validation), ("test", &test)] {
        let mut bytes = Vec::new();
        export_delimited(coll, &mut bytes)?;
        write_output(&mut mb, name, &out.join(format!("{name}.csv")), &bytes)?;
    }
    mb.note("tasks", train.len());
    println!(
        "wrote {} tasks ({} / {} / {} samples) to {}",
        train.len(),
        train.total_samples(),
        validation.total_samples(),
        test.total_samples(),
        out.display()
    );
    mb.finish(&out.join("manifest.json")).map(Some)
}

fn query_auc(model: EvalModel<'_>, data: &TaskCollection, cfg: &TrainConfig) -> Result<Option<f64>, CliError> {
    let protocol = EvalProtocol {
        workers: cfg.workers,
        ..EvalProtocol::no_fine_tune()
    };
    let query = data.query_only();
    let empty = TaskCollection::empty(data.meta_dim(), data.other_dim());
    let report = evaluate(model, &protocol, &empty, &query, &Cohorts::by_test_count(Vec::new()), cfg.seed)?;
    Ok(report.auc())
}

fn write_metrics(report: &TrainReport) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    for s in &report.steps {
        let line = serde_json::json!({
            "step": s.step,
            "loss": s.loss,
            "lr": s.lr,
            "grad_norm": s.grad_norm,
        });
        serde_json::to_writer(&mut out, &line).map_err(|e| CliError::runtime(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn cmd_train(common: &Common, algorithm: Algorithm, data: &Path, out: &Path) -> CmdResult {
    let mut defaults = train_defaults();
    defaults.push(("vanilla_samples".into(), "all".into()));
    let settings = Settings::resolve(defaults, TRAIN_CONFIG_KEYS, common, &[])?;
    let cfg = train_config(&settings)?;
    let train_path = split_path(data, "train");
    let raw = load(&train_path, &settings)?;
    let tasks = prepared(&settings, &raw)?;
    let mut mb = ManifestBuilder::start("train", &settings);
    let mut args = vec!["--algorithm".to_string(), algorithm.name().to_string()];
    args.extend(path_arg("--data", &train_path));
    args.extend(path_arg("--out", out));
    mb.command(args, &settings);
    mb.input("train", &train_path);

    let rng = || ChaCha8Rng::seed_from_u64(cfg.seed);
    let created = |report: &TrainReport| CreationInfo {
        tool_version: TOOL_VERSION.into(),
        algorithm: algorithm.name().into(),
        steps: report.steps.len(),
        final_loss: report.final_loss(),
        meta_dim: raw.meta_dim(),
        other_dim: raw.other_dim(),
    };
    let started = Instant::now();
    let (checkpoint, report, auc) = match algorithm {
        Algorithm::Vanilla | Algorithm::Maml => {
            let spec = network_spec(&settings, &raw)?;
            let init = spec.init_params(&mut rng());
            let (params, report): (ParamSet, TrainReport) = if algorithm == Algorithm::Vanilla {
                let data = match settings.str("vanilla_samples") {
                    "all" => tasks.clone(),
                    "query" => tasks.query_only(),
                    other => {
                        return Err(CliError::usage(format!(
                            "bad value `{other}` for `vanilla_samples` (all or query)"
                        )))
                    }
                };
                vanilla_train(&data, &spec, init, &cfg)?
            } else {
                maml_train(&tasks, &spec, init, &cfg)?
            };
            let auc = query_auc(EvalModel::Network { spec: &spec, params: &params }, &tasks, &cfg)?;
            let ckpt = Checkpoint::for_network(&spec, &params, &cfg, created(&report))?;
            (ckpt, report, auc)
        }
        Algorithm::Limaml => {
            let arch = bundle_arch(&settings, &tasks)?;
            let init = ModelBundle::init(arch, &mut rng())?;
            let (bundle, report) = limaml_train(&tasks, &init, &cfg)?;
            let auc = query_auc(EvalModel::Bundle(&bundle), &tasks, &cfg)?;
            (Checkpoint::for_bundle(&bundle, &cfg, created(&report)), report, auc)
        }
    };
    let train_ms = started.elapsed().as_secs_f64() * 1e3;
    write_output(&mut mb, "checkpoint", out, checkpoint.to_json()?.as_bytes())?;
    write_output(&mut mb, "metrics", &sibling(out, "metrics.jsonl"), &write_metrics(&report)?)?;
    mb.note("train_ms", train_ms);
    mb.note("final_loss", report.final_loss());
    mb.note("final_query_auc", auc);
    println!(
        "trained {} for {} steps: final loss {}, query AUC {}",
        algorithm.name(),
        report.steps.len(),
        report.final_loss().map_or("n/a".into(), |l| format!("{l:.6}")),
        auc.map_or("n/a".into(), |a| format!("{a:.6}"))
    );
    mb.finish(&sibling(out, "manifest.json")).map(Some)
}

pub fn cmd_embedgen(common: &Common, checkpoint: &Path, data: &Path, out: &Path) -> CmdResult {
    let mut defaults = defaults_of(&EmbedGenConfig::default());
    defaults.retain(|(k, _)| k != "version");
    defaults.extend(pairs(&[("version", "auto"), ("splits", "train,validation"), ("seed", "0")]));
    defaults.extend(pairs(DATA_DEFAULTS));
    let settings = Settings::resolve(defaults, &[], common, &[])?;
    let mut config: EmbedGenConfig = settings.build(&EmbedGenConfig::default())?;
    let bundle = checkpoint_at(checkpoint)?.bundle()?;

    let mut mb = ManifestBuilder::start("embedgen", &settings);
    let mut parts = Vec::new();
    let paths: Vec<PathBuf> = if data.is_dir() {
        settings
            .list::<String>("splits")?
            .iter()
            .map(|s| split_path(data, s))
            .collect()
    } else {
        vec![data.to_path_buf()]
    };
    for p in &paths {
        parts.push(load(p, &settings)?);
        mb.input(&p.file_stem().unwrap_or_default().to_string_lossy(), p);
    }
    mb.input("checkpoint", checkpoint);
    let history = merge(&parts)?;
    let as_of = config
        .as_of
        .unwrap_or_else(|| history.samples().map(|s| s.timestamp).max().unwrap_or(0));
    config.as_of = Some(as_of);
    if config.version == "auto" {
        config.version = date_of(as_of)?;
    }
    let gen = generate_embeddings(&history, &bundle, &config)?;
    let snapshot = EmbeddingSnapshot::from_embeddings(&config.version, bundle.embedding_dim(), &gen.embeddings)?;
    if snapshot.is_empty() {
        log::warn!("no task has enough samples in the window; the snapshot is empty");
    }
    let mut args = path_arg("--checkpoint", checkpoint).to_vec();
    args.extend(path_arg("--data", data));
    args.extend(path_arg("--out", out));
    mb.command(args, &settings);
    write_output(&mut mb, "snapshot", out, &snapshot.encode())?;
    mb.note("embeddings", snapshot.len());
    mb.note("skipped", gen.skipped.len());
    mb.note("as_of", as_of);
    mb.note("version", config.version.clone());
    println!(
        "wrote {} embeddings (version {}, {} tasks skipped) to {}",
        snapshot.len(),
        config.version,
        gen.skipped.len(),
        out.display()
    );
    mb.finish(&sibling(out, "manifest.json")).map(Some)
}

pub struct ServeArgs<'a> {
    pub checkpoint: &'a Path,
    pub snapshot: &'a Path,
    pub fallback: Option<String>,
    pub listen: Option<&'a str>,
    pub input: Option<&'a Path>,
    pub output: Option<&'a Path>,
    pub max_connections: Option<usize>,
}

pub fn cmd_serve(common: &Common, a: ServeArgs<'_>) -> CmdResult {
    let mut defaults = common_defaults();
    defaults.push(("fallback".into(), "zero".into()));
    let settings = Settings::resolve(defaults, &[], common, &[("fallback", a.fallback.clone())]).map_err(CliError::as_runtime)?;
    let startup = || -> Result<(GlobalScorer, usize), CliError> {
        let fallback: Fallback = settings.str("fallback").parse()?;
        let workers: usize = settings.parse("workers")?;
        let bundle = checkpoint_at(a.checkpoint)?.bundle()?;
        let snapshot = snapshot_at(a.snapshot)?;
        Ok((GlobalScorer::new(&bundle, snapshot, fallback)?, workers.max(1)))
    };
    let (scorer, workers) = startup().map_err(CliError::as_runtime)?;

    if let Some(addr) = a.listen {
        let listener = TcpListener::bind(addr).map_err(|e| CliError::runtime(format!("cannot listen on {addr}: {e}")))?;
        eprintln!("listening on {}", listener.local_addr()?);
        scorer.serve_listener(&listener, a.max_connections)?;
        return Ok(None);
    }
    let input: Box<dyn std::io::BufRead> = match a.input {
        Some(p) => Box::new(BufReader::new(fs::File::open(p)?)),
        None => Box::new(std::io::stdin().lock()),
    };
    let Some(out_path) = a.output else {
        let stdout = std::io::stdout();
        let mut lock = stdout.lock();
        let stats = scorer.batch_score(input, &mut lock, workers)?;
        lock.flush()?;
        eprintln!(
            "served {} requests ({} fallback, {} errors)",
            stats.requests, stats.fallbacks, stats.errors
        );
        return Ok(None);
    };
    let mut bytes = Vec::new();
    let stats = scorer.batch_score(input, &mut bytes, workers)?;
    let mut mb = ManifestBuilder::start("serve", &settings);
    let mut args = path_arg("--checkpoint", a.checkpoint).to_vec();
    args.extend(path_arg("--snapshot", a.snapshot));
    if let Some(p) = a.input {
        args.extend(path_arg("--input", p));
        mb.input("requests", p);
    }
    args.extend(path_arg("--output", out_path));
    mb.command(args, &settings);
    mb.input("checkpoint", a.checkpoint);
    mb.input("snapshot", a.snapshot);
    write_output(&mut mb, "responses", out_path, &bytes)?;
    mb.note("requests", stats.requests);
    mb.note("fallbacks", stats.fallbacks);
    mb.note("errors", stats.errors);
    eprintln!(
        "served {} requests ({} fallback, {} errors)",
        stats.requests, stats.fallbacks, stats.errors
    );
    mb.finish(&sibling(out_path, "manifest.json")).map(Some)
}

const PROTOCOL_DEFAULTS: &[(&str, &str)] = &[
    ("pooling", "latest"),
    ("scope", "full_network"),
    ("small_threshold", "25"),
];

fn parse_pooling(settings: &Settings) -> Result<(Pooling, FineTuneScope), CliError> {
    Ok((settings.str("pooling").parse()?, settings.str("scope").parse()?))
}

pub struct EvalArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub vanilla: Option<&'a Path>,
    pub maml: Option<&'a Path>,
    pub limaml: Option<&'a Path>,
}

pub fn cmd_eval(common: &Common, a: EvalArgs<'_>) -> CmdResult {
    let mut defaults = common_defaults();
    defaults.extend(pairs(PROTOCOL_DEFAULTS));
    defaults.extend(pairs(DATA_DEFAULTS));
    defaults.extend(pairs(&[
        ("k", "1"),
        ("alpha", "0.1"),
        ("split", "test"),
        ("sample_cap", "64"),
        ("support_fraction", "0.75"),
    ]));
    let settings = Settings::resolve(defaults, &[], common, &[])?;
    if a.vanilla.is_none() && a.maml.is_none() && a.limaml.is_none() {
        return Err(CliError::usage("give at least one of --vanilla, --maml, --limaml".into()));
    }
    let (pooling, scope) = parse_pooling(&settings)?;
    let fine_tuned = EvalProtocol {
        fine_tune: true,
        k: settings.parse("k")?,
        alpha: settings.parse("alpha")?,
        pooling,
        scope,
        workers: settings.parse("workers")?,
    };
    let frozen = EvalProtocol {
        fine_tune: false,
        ..fine_tuned.clone()
    };
    let seed: u64 = settings.parse("seed")?;
    let threshold: usize = settings.parse("small_threshold")?;

    let mut mb = ManifestBuilder::start("eval", &settings);
    let train_path = split_path(a.data, "train");
    let train = load(&train_path, &settings)?;
    mb.input("train", &train_path);
    let (validation, test, cohorts) = match settings.str("split") {
        "test" => {
            let vp = split_path(a.data, "validation");
            let tp = split_path(a.data, "test");
            let (v, t) = (load(&vp, &settings)?, load(&tp, &settings)?);
            mb.input("validation", &vp);
            mb.input("test", &tp);
            let cohorts = Cohorts::split_at(threshold, &[&train, &v, &t]);
            (v, t, cohorts)
        }
        "train_query" => {
            let tasks = prepared(&settings, &train)?;
            let cohorts = Cohorts::split_at(threshold, &[&tasks]);
            (
                TaskCollection::empty(train.meta_dim(), train.other_dim()),
                tasks.query_only(),
                cohorts,
            )
        }
        other => return Err(CliError::usage(format!("bad value `{other}` for `split` (test or train_query)"))),
    };

    let mut columns: Vec<(String, EvalReport)> = Vec::new();
    let mut args = path_arg("--data", a.data).to_vec();
    args.extend(path_arg("--out", a.out));
    for (label, path) in [("Vanilla", a.vanilla), ("MAML", a.maml)] {
        let Some(path) = path else { continue };
        let (spec, params) = checkpoint_at(path)?.network()?;
        mb.input(&label.to_lowercase(), path);
        args.extend(path_arg(&format!("--{}", label.to_lowercase()), path));
        let model = EvalModel::Network { spec: &spec, params: &params };
        columns.push((format!("{label} no fine-tune"), evaluate(model, &frozen, &validation, &test, &cohorts, seed)?));
        columns.push((format!("{label} fine-tune"), evaluate(model, &fine_tuned, &validation, &test, &cohorts, seed)?));
    }
    if let Some(path) = a.limaml {
        let bundle = checkpoint_at(path)?.bundle()?;
        mb.input("limaml", path);
        args.extend(path_arg("--limaml", path));
        let report = evaluate(EvalModel::Bundle(&bundle), &fine_tuned, &validation, &test, &cohorts, seed)?;
        columns.push(("LiMAML fine-tune".into(), report));
    }
    mb.command(args, &settings);
    let table = ComparisonTable { columns };
    fs::create_dir_all(a.out)?;
    let text = table.render_text();
    write_output(&mut mb, "report_text", &a.out.join("report.txt"), text.as_bytes())?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    write_output(&mut mb, "report_csv", &a.out.join("report.csv"), &csv)?;
    for (name, report) in &table.columns {
        mb.note(&format!("unadapted_tasks/{name}"), report.unadapted_tasks);
    }
    print!("{text}");
    mb.finish(&a.out.join("manifest.json")).map(Some)
}

pub struct SweepArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub param: Option<String>,
    pub values: Option<String>,
    pub replicates: Option<usize>,
}

pub const SWEEP_TIMING_COLUMNS: &[&str] = &["train_ms", "train_time_increase_pct"];

pub fn cmd_sweep(common: &Common, a: SweepArgs<'_>) -> CmdResult {
    let mut defaults = train_defaults();
    defaults.extend(pairs(PROTOCOL_DEFAULTS));
    defaults.extend(pairs(&[
        ("eval_k", "1"),
        ("param", "inner_steps"),
        ("values", "1,2,3,4,5"),
        ("replicates", "1"),
    ]));
    let flags = [
        ("param", a.param.clone()),
        ("values", a.values.clone()),
        ("replicates", a.replicates.map(|r| r.to_string())),
    ];
    let settings = Settings::resolve(defaults, &[], common, &flags)?;
    let cfg = train_config(&settings)?;
    let param: SweepParam = settings.str("param").parse()?;
    let spec = SweepSpec::new(param, settings.list::<String>("values")?, settings.parse("replicates")?)?;
    let (pooling, scope) = parse_pooling(&settings)?;
    let protocol = EvalProtocol {
        fine_tune: true,
        k: settings.parse("eval_k")?,
        alpha: cfg.alpha,
        pooling,
        scope,
        workers: cfg.workers,
    };

    let mut mb = ManifestBuilder::start("sweep", &settings);
    let mut split = |name: &str| -> Result<TaskCollection, CliError> {
        let p = split_path(a.data, name);
        mb.input(name, &p);
        load(&p, &settings)
    };
    let (train, validation, test) = (split("train")?, split("validation")?, split("test")?);
    let tasks = prepared(&settings, &train)?;
    let arch = bundle_arch(&settings, &tasks)?;
    let baseline = network_spec(&settings, &tasks)?;
    let cohorts = Cohorts::split_at(settings.parse("small_threshold")?, &[&train, &validation, &test]);
    let inputs = SweepInputs {
        train: &tasks,
        validation: &validation,
        test: &test,
        arch: &arch,
        baseline: &baseline,
    };
    let table = run_sweep(&spec, &cfg, &protocol, inputs, &cohorts)?;
    if table.failures() > 0 {
        log::warn!("{} sweep runs failed; see the failures column", table.failures());
    }
    let mut args = path_arg("--data", a.data).to_vec();
    args.extend(path_arg("--out", a.out));
    mb.command(args, &settings);
    fs::create_dir_all(a.out)?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    let csv_path = a.out.join("sweep.csv");
    write_atomic(&csv_path, &csv)?;
    mb.output_excluding("sweep_csv", &csv_path, &csv, SWEEP_TIMING_COLUMNS)?;
    let text = table.render_text();
    let text_path = a.out.join("sweep.txt");
    write_atomic(&text_path, text.as_bytes())?;
    mb.volatile_output("sweep_text", &text_path);
    mb.note("failures", table.failures());
    print!("{text}");
    mb.finish(&a.out.join("manifest.json")).map(Some)
}

pub fn cmd_export(common: &Common, snapshot: &Path, out: &Path) -> CmdResult {
    let settings = Settings::resolve(common_defaults(), &[], common, &[])?;
    let snap = snapshot_at(snapshot)?;
    let mut bytes = Vec::new();
    snap.export_tsv(&mut bytes)?;
    let mut mb = ManifestBuilder::start("export", &settings);
    let mut args = path_arg("--snapshot", snapshot).to_vec();
    args.extend(path_arg("--out", out));
    mb.command(args, &settings);
    mb.input("snapshot", snapshot);
    write_output(&mut mb, "tsv", out, &bytes)?;
    println!("exported {} records to {}", snap.len(), out.display());
    mb.finish(&sibling(out, "manifest.json")).map(Some)
}
