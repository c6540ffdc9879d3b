//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::time::{Duration as StdDuration, Instant};

use chrono::{DateTime, Duration, TimeZone, Utc};
use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use caravan_core::collection::{generate_corpus, CorpusMode, RunContext};
use caravan_core::domain::{content_id, ArtifactId, FeatureFamily, Seed};
use caravan_core::engine::{Engine, PipelineConfig, StageRequest};
use caravan_core::instrument::Instrumentation;
use caravan_core::linalg::Pca;
use caravan_core::model::autoencoder::{Activation, Loss, Network};
use caravan_core::model::kmeans::{kmeans, MAX_ITER, TOL};
use caravan_core::model::metrics::{confusion, metrics, Counts, METRIC_NAMES};
use caravan_core::model::load_evaluation;
use caravan_core::preprocessing::{
    self, load_merged, load_processed, load_selected, ChainStep, MergeConfig, PreprocessConfig, SelectionConfig,
    Targets,
};
use caravan_core::queue::{Queue, QueueConfig, Stage, TaskSpec, TaskStatus};
use caravan_core::store::{parse_provenance_xml, render_provenance_xml, ArtifactKind, ArtifactStore, ProvenanceRecord};
use caravan_core::Error;

use common::{caravan, caravan_with_env, generate_corpus as cli_corpus, is_api_error, missing_keys, stderr, stdout, Http, Server};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>, what: &str) -> Result<T, String> {
    r.map_err(|e| format!("{what}: {e}"))
}

const CATEGORIES: [&str; 4] = ["game", "music", "social", "tool"];

fn pipeline_json(corpus: &Path, workers: usize) -> Value {
    json!({
        "master_seed": 2024,
        "workers": workers,
        "crawl": {"index_url": corpus.to_str().unwrap()},
        "select": {"categories": CATEGORIES, "name": "all", "balanced": true},
        "merge": {"name": "split", "train_fraction": 0.8},
        "preprocess": {"name": "scaled", "chain": [{"plugin_id": "minmax_scaler"}]},
        "train": {
            "algorithm_class": "autoencoder",
            "algorithm_id": "autoencoder",
            "model_name": "ae",
            "hyperparams": {"encoder_layers": [32, 4], "epochs": 150, "optimizer": "adam", "learning_rate": 0.01}
        }
    })
}

struct Shared {
    root: tempfile::TempDir,
    /// Data dir of an uninterrupted `caravan run`, kept for the resume check.
    reference: Option<std::path::PathBuf>,
}

fn run_cli(config: &Path, data_dir: &Path, env: &[(&str, &str)]) -> std::process::Output {
    caravan_with_env(
        &["run", "--config", config.to_str().unwrap(), "--data-dir", data_dir.to_str().unwrap()],
        env,
    )
}

fn model_of(out: &std::process::Output) -> Result<String, String> {
    let v: Value = ok(serde_json::from_str(&stdout(out)), "run output")?;
    v["model"].as_str().map(str::to_string).ok_or_else(|| "run printed no model".into())
}

fn c1_determinism(shared: &mut Shared) -> Outcome {
    let corpus = shared.root.path().join("corpus");
    cli_corpus(&corpus, 100, &CATEGORIES.join(","), 77);
    let config = shared.root.path().join("pipeline.json");
    std::fs::write(&config, pipeline_json(&corpus, 4).to_string()).unwrap();

    let mut models = Vec::new();
    let mut xmls = Vec::new();
    let mut slowest = StdDuration::ZERO;
    for run in ["run-a", "run-b"] {
        let dir = shared.root.path().join(run);
        let started = Instant::now();
        let out = run_cli(&config, &dir, &[]);
        slowest = slowest.max(started.elapsed());
        ensure!(out.status.success(), "{run} failed: {}", stderr(&out));
        let model = model_of(&out)?;
        let xml = caravan(&[
            "provenance",
            "export",
            "--artifact",
            &model,
            "--format",
            "xml",
            "--data-dir",
            dir.to_str().unwrap(),
        ]);
        ensure!(xml.status.success(), "provenance export failed: {}", stderr(&xml));
        models.push(model);
        xmls.push(stdout(&xml));
    }
    shared.reference = Some(shared.root.path().join("run-a"));
    ensure!(models[0] == models[1], "model ids differ: {} vs {}", models[0], models[1]);
    ensure!(xmls[0] != xmls[1], "run ids and timestamps were expected to differ between runs");
    let (a, b) = (common::strip_volatile(&xmls[0]), common::strip_volatile(&xmls[1]));
    ensure!(a == b, "provenance differs beyond run ids and timestamps");
    ensure!(slowest < StdDuration::from_secs(120), "slowest run took {slowest:?}");
    let records = a.matches("<record ").count();
    Ok(format!(
        "model {} identical, {records} lineage records identical, slowest run {:.1}s",
        &models[0][..12],
        slowest.as_secs_f64()
    ))
}

fn trace_extractions(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| {
            let mut parts = l.split('\t');
            (parts.next() == Some("extract")).then(|| (parts.next().unwrap().to_string(), parts.next().unwrap().to_string()))
        })
        .collect()
}

fn c2_resumability(shared: &mut Shared) -> Outcome {
    let reference = shared.reference.clone().ok_or("criterion 1 did not leave a reference run")?;
    let corpus = shared.root.path().join("corpus");
    let config = shared.root.path().join("pipeline-serial.json");
    std::fs::write(&config, pipeline_json(&corpus, 1).to_string()).unwrap();
    let dir = shared.root.path().join("crash");
    let trace = shared.root.path().join("trace.log");
    let trace_s = trace.to_str().unwrap();

    let crashed = run_cli(&config, &dir, &[("CARAVAN_TRACE", trace_s), ("CARAVAN_ABORT_AFTER_EXTRACTIONS", "10")]);
    ensure!(!crashed.status.success(), "the instrumented run was expected to abort");
    let before = std::fs::read_to_string(&trace).unwrap();
    ensure!(before.ends_with("abort\n"), "trace does not end with the abort marker");
    let mut per_package: BTreeMap<String, usize> = BTreeMap::new();
    for (p, _) in trace_extractions(&before) {
        *per_package.entry(p).or_default() += 1;
    }
    let partial = per_package.values().filter(|&&n| (2..FeatureFamily::ALL.len()).contains(&n)).count();
    ensure!(partial >= 1, "no package had at least two but not all families done at the crash");

    let resumed = run_cli(&config, &dir, &[("CARAVAN_TRACE", trace_s)]);
    ensure!(resumed.status.success(), "resumed run failed: {}", stderr(&resumed));
    let model = model_of(&resumed)?;

    let all = trace_extractions(&std::fs::read_to_string(&trace).unwrap());
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for key in all {
        *counts.entry(key).or_default() += 1;
    }
    let repeated: Vec<_> = counts.iter().filter(|(_, &n)| n != 1).collect();
    ensure!(repeated.is_empty(), "extracted more than once: {repeated:?}");
    ensure!(
        counts.len() == 100 * FeatureFamily::ALL.len(),
        "{} (package, family) pairs extracted, expected {}",
        counts.len(),
        100 * FeatureFamily::ALL.len()
    );

    let a = ok(Engine::open(&dir, Instrumentation::new()), "open resumed dir")?;
    let b = ok(Engine::open(&reference, Instrumentation::new()), "open reference dir")?;
    let records = ok(b.collector().package_records(), "package records")?;
    for r in &records {
        let fa = a.collector().featureset_id(&r.package_id).ok_or("missing featureset after resume")?;
        let fb = b.collector().featureset_id(&r.package_id).ok_or("missing reference featureset")?;
        let (ba, bb) = (ok(a.store().get(&fa), "read")?, ok(b.store().get(&fb), "read")?);
        ensure!(ba == bb, "featureset of {} differs from the uninterrupted run", r.package_id);
    }
    let reference_model = b.store().get_ref_id("model/ae").ok_or("reference model missing")?;
    ensure!(model == reference_model.to_string(), "resumed model id differs from the uninterrupted run");
    Ok(format!(
        "crash after 10 units ({} packages partially extracted); {} pairs extracted once each; {} featuresets byte-identical",
        partial,
        counts.len(),
        records.len()
    ))
}

fn c3_orchestrator() -> Outcome {
    let seeds = 20;
    let (workers, tasks) = (4, 50);
    let mut steps_total = 0;
    for seed in 0..seeds {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.log");
        let q = ok(Queue::open(&path, QueueConfig::default()), "open queue")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t0 = Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap();
        for i in 0..tasks {
            let mut spec = TaskSpec::new(Stage::Extract, vec![], Seed(seed), t0);
            spec.task_id = format!("t{i:02}");
            spec.units = vec!["a".into(), "b".into(), "c".into()];
            ok(q.submit(spec), "submit")?;
        }
        let mut now = t0;
        let mut held: Vec<Option<(String, DateTime<Utc>)>> = vec![None; workers];
        let mut steps = 0;
        while q.tasks().iter().any(|t| !t.state.status.is_terminal()) {
            steps += 1;
            ensure!(steps < 200_000, "seed {seed}: no convergence");
            let w = rng.random_range(0..workers);
            let wid = format!("w{w}");
            match held[w].clone() {
                None => {
                    if let Some(lease) = ok(q.claim(&wid, now), "claim")? {
                        held[w] = Some((lease.task_id, lease.lease_expiry));
                    }
                }
                Some((task, _)) => {
                    let roll: f64 = rng.random();
                    let result = if roll < 0.3 {
                        q.heartbeat(&task, &wid, now).map(|e| held[w] = Some((task.clone(), e)))
                    } else if roll < 0.55 {
                        let unit = ["a", "b", "c"][rng.random_range(0..3)];
                        q.record_unit_done(&task, &wid, unit, now)
                    } else if roll < 0.7 {
                        held[w] = None;
                        q.fail(&task, &wid, "injected", true, now)
                    } else if roll < 0.73 {
                        held[w] = None;
                        Ok(())
                    } else {
                        held[w] = None;
                        q.complete(&task, &wid, vec![], now)
                    };
                    match result {
                        Ok(()) => {}
                        Err(Error::LeaseLost(_)) => held[w] = None,
                        Err(e) => return Err(format!("seed {seed}: unexpected {e}")),
                    }
                }
            }
            let jump = if rng.random_bool(0.05) { 45 } else { rng.random_range(0..4) };
            now += Duration::seconds(jump);

            let mut live: HashMap<&str, usize> = HashMap::new();
            for (task, expiry) in held.iter().flatten() {
                if *expiry > now {
                    *live.entry(task.as_str()).or_default() += 1;
                }
            }
            ensure!(live.values().all(|&c| c <= 1), "seed {seed}: two live leases on one task");
        }
        let final_tasks = q.tasks();
        ensure!(final_tasks.len() == tasks, "seed {seed}: {} tasks left of {tasks}", final_tasks.len());
        ensure!(final_tasks.iter().all(|t| t.state.status.is_terminal()), "seed {seed}: task not terminal");
        let replay = ok(Queue::open(&path, QueueConfig::default()), "reopen")?;
        ensure!(replay.tasks() == final_tasks, "seed {seed}: replayed log disagrees");
        steps_total += steps;
    }
    Ok(format!(
        "{seeds} seeds x {tasks} tasks x {workers} workers, {steps_total} steps, 0 double leases, 0 lost"
    ))
}

struct Reference {
    values: [f64; 9],
    defined: [bool; 9],
}

/// Metrics from a full class-by-class count table.
fn brute_force(preds: &[String], truths: &[String], classes: &[String]) -> (Vec<Counts>, Vec<Reference>) {
    let k = classes.len();
    let pos = |l: &String| classes.iter().position(|c| c == l).unwrap();
    let mut table = vec![vec![0u64; k]; k];
    for (p, t) in preds.iter().zip(truths) {
        table[pos(t)][pos(p)] += 1;
    }
    let n: u64 = table.iter().flatten().sum();
    let div = |a: u64, b: u64| if b == 0 { (0.0, false) } else { (a as f64 / b as f64, true) };
    let mut counts = Vec::new();
    let mut refs = Vec::new();
    for c in 0..k {
        let tp = table[c][c];
        let row: u64 = table[c].iter().sum();
        let col: u64 = (0..k).map(|r| table[r][c]).sum();
        let (fn_, fp) = (row - tp, col - tp);
        let tn = n - tp - fn_ - fp;
        counts.push(Counts { tp, tn, fp, fn_ });
        let acc = div(tp + tn, n);
        let prec = div(tp, tp + fp);
        let rec = div(tp, tp + fn_);
        let spec = div(tn, tn + fp);
        let f1 = if prec.1 && rec.1 && prec.0 + rec.0 > 0.0 {
            (2.0 * prec.0 * rec.0 / (prec.0 + rec.0), true)
        } else {
            (0.0, false)
        };
        let fpr = div(fp, fp + tn);
        let fnr = div(fn_, fn_ + tp);
        let all = [acc, prec, rec, spec, f1, rec, fpr, spec, fnr];
        refs.push(Reference {
            values: all.map(|x| x.0),
            defined: all.map(|x| x.1),
        });
    }
    (counts, refs)
}

fn c4_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut identities = 0;
    for i in 0..1000 {
        let k = rng.random_range(1..=6);
        let classes: Vec<String> = (0..k).map(|c| format!("c{c}")).collect();
        let n = rng.random_range(0..=40);
        let truths: Vec<String> = (0..n).map(|_| classes.choose(&mut rng).unwrap().clone()).collect();
        let preds: Vec<String> = truths
            .iter()
            .map(|t| if rng.random_bool(0.5) { t.clone() } else { classes.choose(&mut rng).unwrap().clone() })
            .collect();
        let set: BTreeSet<String> = classes.iter().cloned().collect();
        let cm = ok(confusion(&preds, &truths, &set), "confusion")?;
        let report = metrics(&cm);
        let (counts, refs) = brute_force(&preds, &truths, &classes);
        let mut sums = [0.0; 9];
        let mut any_undefined = [false; 9];
        for (c, ((got_counts, got), (want_counts, want))) in cm
            .classes
            .iter()
            .zip(&report.per_class)
            .zip(counts.iter().zip(&refs))
            .enumerate()
        {
            ensure!(got_counts.counts == *want_counts, "instance {i} class {c}: counts differ");
            let values = got.metrics.values.values();
            for m in 0..9 {
                worst = worst.max((values[m] - want.values[m]).abs());
                ensure!(
                    got.metrics.is_undefined(METRIC_NAMES[m]) != want.defined[m],
                    "instance {i} class {c}: undefined flag of {} differs",
                    METRIC_NAMES[m]
                );
                sums[m] += want.values[m];
                any_undefined[m] |= !want.defined[m];
            }
            if want.defined[2] && want.defined[8] {
                ensure!((values[2] + values[8] - 1.0).abs() <= 1e-12, "recall + fnr != 1");
                identities += 1;
            }
            if want.defined[3] && want.defined[6] {
                ensure!((values[3] + values[6] - 1.0).abs() <= 1e-12, "specificity + fpr != 1");
                identities += 1;
            }
        }
        let macro_values = report.macro_avg.values.values();
        for m in 0..9 {
            worst = worst.max((macro_values[m] - sums[m] / k as f64).abs());
            ensure!(
                report.macro_avg.is_undefined(METRIC_NAMES[m]) == any_undefined[m],
                "instance {i}: macro undefined flag of {} differs",
                METRIC_NAMES[m]
            );
        }
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e}");
    Ok(format!("1000 instances, max deviation {worst:e}, {identities} identities checked"))
}

fn c5_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows = |rng: &mut ChaCha8Rng, n: usize, d: usize| DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
    let net = ok(Network::init(20, &[8, 3], Activation::Sigmoid, Loss::Mse, Seed(1)), "init")?;
    let x = rows(&mut rng, 5, 20);
    let base = ok(net.gradient_check(&x, 1e-5), "gradient check")?;
    ensure!(base < 1e-4, "[20,8,3]: relative error {base:e}");
    let relu = ok(Network::init(20, &[8, 3], Activation::Relu, Loss::Mse, Seed(1)), "init")?;
    let relu_err = ok(relu.gradient_check(&x, 1e-5), "gradient check")?;
    ensure!(relu_err < 1e-4, "[20,8,3] relu: relative error {relu_err:e}");
    // Random shapes can leave a whole hidden row dead, which puts the next
    // pre-activation exactly on the relu kink, so the sweep stays smooth.
    // Three sigmoid encoder layers shrink early gradients to ~1e-9, below
    // the rounding floor of a central difference at h = 1e-5.
    let mut worst = base.max(relu_err);
    for i in 0..20 {
        let input = rng.random_range(2..=16);
        let depth = rng.random_range(1..=2);
        let layers: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=16)).collect();
        let activation = Activation::Sigmoid;
        let loss = if rng.random_bool(0.5) { Loss::Mse } else { Loss::Bce };
        let net = ok(Network::init(input, &layers, activation, loss, Seed(100 + i)), "init")?;
        let x = rows(&mut rng, 5, input);
        let err = ok(net.gradient_check(&x, 1e-5), "gradient check")?;
        ensure!(err < 1e-4, "architecture {input}->{layers:?} ({activation:?}, {loss:?}): relative error {err:e}");
        worst = worst.max(err);
    }
    Ok(format!("[20,8,3] error {base:.2e} sigmoid, {relu_err:.2e} relu; 20 random architectures, worst {worst:.2e}"))
}

fn c6_forced_accuracy(shared: &Shared) -> Outcome {
    let corpus = shared.root.path().join("corpus-c6");
    let cats: Vec<String> = CATEGORIES.iter().map(|s| s.to_string()).collect();
    ok(generate_corpus(80, &cats, CorpusMode::Disjoint, Seed(6), &corpus), "corpus")?;
    let engine = ok(Engine::open(shared.root.path().join("c6"), Instrumentation::new()), "open")?;
    let base = |train: Value| -> Result<PipelineConfig, String> {
        ok(
            serde_json::from_value(json!({
                "master_seed": 6,
                "crawl": {"index_url": corpus.to_str().unwrap()},
                "select": {"categories": CATEGORIES, "name": "all"},
                "merge": {"name": "split", "train_fraction": 0.75},
                "preprocess": {"name": "scaled", "chain": [{"plugin_id": "minmax_scaler"}]},
                "train": train,
            })),
            "config",
        )
    };
    let knn = base(json!({"algorithm_class": "classical", "algorithm_id": "knn", "model_name": "nn", "hyperparams": {"k": 1}}))?;
    let softmax = base(json!({"algorithm_class": "classical", "algorithm_id": "softmax_regression", "model_name": "sm"}))?;
    let ae = base(json!({
        "algorithm_class": "autoencoder", "algorithm_id": "autoencoder", "model_name": "ae",
        "hyperparams": {"encoder_layers": [32, 4], "epochs": 150, "optimizer": "adam", "learning_rate": 0.01}
    }))?;
    let mut accuracies = Vec::new();
    for (name, config) in [("1-NN", &knn), ("softmax", &softmax)] {
        let out = ok(engine.run_pipeline(config), name)?;
        let report = ok(load_evaluation(engine.store(), &out.model), "evaluation")?;
        ensure!(report.test_accuracy == 1.0, "{name} test accuracy {}", report.test_accuracy);
        accuracies.push(format!("{name} {}", report.test_accuracy));
    }
    let out = ok(engine.run_pipeline(&ae), "autoencoder")?;
    let report = ok(load_evaluation(engine.store(), &out.model), "evaluation")?;
    let latent = report.points.first().map(|p| p.latent.len()).unwrap_or(0);
    ensure!(latent >= CATEGORIES.len(), "latent dim {latent} below class count");
    ensure!(report.kmeans.purity >= 0.9, "autoencoder k-means purity {}", report.kmeans.purity);
    Ok(format!(
        "{}; autoencoder latent dim {latent}, k-means purity {:.3}",
        accuracies.join(", "),
        report.kmeans.purity
    ))
}

fn c7_stage2() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let cats: Vec<String> = CATEGORIES.iter().map(|s| s.to_string()).collect();
    ok(generate_corpus(48, &cats, CorpusMode::Overlap, Seed(7), &corpus), "corpus")?;
    let engine = ok(Engine::open(dir.path().join("data"), Instrumentation::new()), "open")?;
    let crawl = ok(
        StageRequest::parse(Stage::Crawl, json!({"master_seed": 7, "index_url": corpus.to_str().unwrap()})),
        "crawl request",
    )?;
    let pool = engine.start_workers(4, StdDuration::from_millis(5));
    let crawl_task = ok(engine.submit(&crawl), "submit crawl")?;
    ok(engine.wait(&crawl_task), "crawl")?;
    for t in engine.queue().tasks() {
        let done = ok(engine.wait(&t.spec.task_id), "extract")?;
        ensure!(done.state.status == TaskStatus::Succeeded, "task {} {:?}", t.spec.task_id, done.state.status);
    }
    pool.shutdown();

    let collector = engine.collector();
    let store = engine.store();
    let registry = engine.registry();
    let run = RunContext::new(Seed(7), "acceptance");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // uneven class sizes through votes
    let packages: Vec<ArtifactId> = ok(collector.package_records(), "records")?.into_iter().map(|r| r.package_id).collect();
    for p in packages.choose_multiple(&mut rng, 14) {
        let to = CATEGORIES[rng.random_range(0..2)];
        ok(collector.cast_vote(p, to, "curator"), "vote")?;
    }

    let mut checks = 0usize;
    for i in 0..200 {
        let mut chosen: Vec<String> = cats.clone();
        chosen.shuffle(&mut rng);
        chosen.truncate(rng.random_range(2..=4));
        let mut families: Vec<FeatureFamily> = FeatureFamily::ALL.to_vec();
        families.shuffle(&mut rng);
        families.truncate(rng.random_range(1..=7));
        let selection = SelectionConfig {
            families: families.into_iter().collect(),
            categories: chosen.iter().cloned().collect(),
            balanced: rng.random_bool(0.5),
            inclusion_fraction: rng.random_range(0.05..=1.0),
            seed: Seed(rng.random()),
            name: format!("sel{i}"),
        };
        let sid = ok(preprocessing::select(collector, &selection, &run), "select")?;
        let selected = ok(load_selected(store, &sid), "load selected")?;
        let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
        for (_, l) in &selected.labels {
            *sizes.entry(l.as_str()).or_default() += 1;
        }
        if selection.balanced {
            let distinct: BTreeSet<usize> = sizes.values().copied().collect();
            ensure!(distinct.len() == 1, "config {i}: balanced selection has class sizes {sizes:?}");
            checks += 1;
        }

        let mut groups: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let n_groups = rng.random_range(1..=chosen.len());
        for (j, c) in chosen.iter().enumerate() {
            let g = if j < n_groups { j } else { rng.random_range(0..n_groups) };
            groups.entry(format!("g{g}")).or_default().insert(c.clone());
        }
        let fraction = rng.random_range(0.1..0.9);
        let merge = MergeConfig {
            selected_dataset: sid.clone(),
            merge_groups: groups.clone(),
            train_fraction: fraction,
            seed: Seed(rng.random()),
            name: format!("merged{i}"),
        };
        let mid = ok(preprocessing::merge(store, &merge, &run), "merge")?;
        let merged = ok(load_merged(store, &mid), "load merged")?;
        let train_ids: BTreeSet<&ArtifactId> = merged.train.ids.iter().collect();
        let test_ids: BTreeSet<&ArtifactId> = merged.test.ids.iter().collect();
        ensure!(train_ids.is_disjoint(&test_ids), "config {i}: train and test overlap");
        let all: BTreeSet<&ArtifactId> = selected.labels.iter().map(|(id, _)| id).collect();
        let union: BTreeSet<&ArtifactId> = train_ids.union(&test_ids).copied().collect();
        ensure!(union == all, "config {i}: partition is not exhaustive");
        let group_of = |cat: &str| groups.iter().find(|(_, m)| m.contains(cat)).map(|(g, _)| g.clone()).unwrap();
        let mut group_sizes: BTreeMap<String, usize> = BTreeMap::new();
        for (_, l) in &selected.labels {
            *group_sizes.entry(group_of(l)).or_default() += 1;
        }
        for (g, size) in &group_sizes {
            let in_train = merged.train.labels.iter().filter(|l| *l == g).count();
            let ideal = fraction * *size as f64;
            ensure!(
                (in_train as f64 - ideal).abs() <= 1.0,
                "config {i}: group {g} has {in_train} train rows, ideal {ideal}"
            );
        }
        checks += 3;

        let pre = PreprocessConfig {
            merged_dataset: mid.clone(),
            chain: vec![ChainStep {
                plugin_id: "standard_scaler".into(),
                params: vec![],
                target_families: Targets::All,
            }],
            seed: Seed(0),
            name: format!("std{i}"),
        };
        let pid = ok(preprocessing::preprocess(store, registry, &pre, &run), "preprocess")?;
        let processed = ok(load_processed(store, &pid), "load processed")?;
        let raw = &merged.train.data;
        let x = &processed.train.data;
        let n = x.nrows() as f64;
        for c in 0..x.ncols() {
            let col = raw.column(c);
            if col.iter().all(|v| *v == col[0]) {
                continue;
            }
            let mean = x.column(c).sum() / n;
            let std = (x.column(c).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            ensure!(mean.abs() < 1e-9 && (std - 1.0).abs() < 1e-9, "config {i}: column {c} mean {mean:e} std {std}");
        }
        checks += 1;

        let d = raw.ncols();
        if raw.nrows() > 0 && d > 0 {
            let pca = ok(Pca::fit(raw, d), "pca")?;
            for a in 0..d {
                for b in 0..d {
                    let dot: f64 = pca.components[a].iter().zip(&pca.components[b]).map(|(x, y)| x * y).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    ensure!((dot - want).abs() < 1e-8, "config {i}: components {a},{b} dot {dot}");
                }
            }
            let back = pca.inverse_transform(&pca.transform(raw));
            let err = (&back - raw).amax();
            ensure!(err < 1e-6, "config {i}: reconstruction error {err:e}");
            checks += 2;
        }
    }
    Ok(format!("200 configurations, {checks} invariant checks"))
}

fn c8_kmeans() -> Outcome {
    let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 1.0, 10.0, 10.0, 10.0, 11.0]);
    let r = ok(kmeans(&x, 2, Seed(8), MAX_ITER, TOL), "kmeans")?;
    let mut centroids = r.centroids.clone();
    centroids.sort_by(|a, b| a[0].total_cmp(&b[0]));
    ensure!(centroids == vec![vec![0.0, 0.5], vec![10.0, 10.5]], "centroids {centroids:?}");
    ensure!(r.inertia == 1.0, "inertia {}", r.inertia);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut iterations = 0;
    for seed in 0..100u64 {
        let n = 60;
        let data = DMatrix::from_fn(n, 3, |i, _| (i % 4) as f64 * 3.0 + rng.random_range(-2.0..2.0));
        let r = ok(kmeans(&data, 4, Seed(seed), MAX_ITER, TOL), "kmeans")?;
        for w in r.inertia_history.windows(2) {
            ensure!(w[1] <= w[0], "seed {seed}: inertia rose from {} to {}", w[0], w[1]);
        }
        iterations += r.inertia_history.len();
    }
    Ok(format!("toy centroids exact, inertia 1.0; 100 seeds monotone over {iterations} iterations"))
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 12] = ["a", "Z", "<", ">", "&", "\"", "'", " ", "é", "→", "\t", "x=1"];
    (0..rng.random_range(1..8)).map(|_| *PIECES.choose(rng).unwrap()).collect()
}

fn c9_provenance() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let store = ok(ArtifactStore::open(dir.path()), "open store")?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = Utc.with_ymd_and_hms(2025, 3, 1, 12, 0, 0).unwrap();
    let mut total = 0;
    for lineage in 0..100 {
        let mut ids: Vec<ArtifactId> = Vec::new();
        for node in 0..rng.random_range(1..=8) {
            let mut inputs: Vec<ArtifactId> = ids.iter().filter(|_| rng.random_bool(0.4)).cloned().collect();
            if inputs.is_empty() && !ids.is_empty() {
                inputs.push(ids.last().unwrap().clone());
            }
            let params = (0..rng.random_range(0..4))
                .map(|k| (format!("p{k}"), random_text(&mut rng)))
                .collect();
            let start = base + Duration::nanoseconds(rng.random_range(0..10_000_000_000_000));
            let record = ProvenanceRecord::begin(
                &random_text(&mut rng),
                "plugin",
                "1.0.0",
                params,
                Seed(rng.random()),
                &random_text(&mut rng),
                start,
            )
            .finished(start + Duration::nanoseconds(rng.random_range(0..1_000_000_000)));
            let payload = format!("lineage {lineage} node {node}");
            let id = ok(store.put(payload.as_bytes(), ArtifactKind::Featureset, &inputs, record), "put")?;
            ids.push(id);
            total += 1;
        }
        let tip = ids.last().unwrap();
        let exported = ok(store.export_provenance_xml(tip), "export")?;
        let (artifact, records) = ok(parse_provenance_xml(&exported), "import")?;
        ensure!(&artifact == tip, "lineage {lineage}: artifact id changed");
        ensure!(records == ok(store.lineage(tip), "lineage")?, "lineage {lineage}: records changed");
        let again = render_provenance_xml(&artifact, &records);
        ensure!(again == exported, "lineage {lineage}: re-export differs");
    }
    let report = store.fsck();
    ensure!(report.is_clean(), "fsck problems: {:?}", report.problems);
    ensure!(report.checked == total, "fsck checked {} of {total}", report.checked);
    Ok(format!("100 lineages ({total} artifacts) round-trip byte-identical; fsck clean"))
}

fn c10_api(shared: &Shared) -> Outcome {
    let dir = shared.root.path().join("api");
    let corpus = shared.root.path().join("corpus-c6");
    let server = Server::start(&dir, 2);
    let http = Http::new(&server.base);
    let mut checked = 0usize;
    let mut expect = |cond: bool, what: String| -> Result<(), String> {
        checked += 1;
        if cond {
            Ok(())
        } else {
            Err(what)
        }
    };

    let plugins = http.get("/api/plugins");
    let list = plugins.json();
    expect(plugins.status == 200 && list.as_array().is_some_and(|a| a.len() >= 9), format!("plugins: {}", plugins.body))?;
    for d in list.as_array().unwrap() {
        expect(
            missing_keys(d, &["plugin_id", "version", "stage", "title", "description", "params"]).is_empty(),
            format!("descriptor shape {d}"),
        )?;
    }
    let schema = http.get("/api/plugins/train/autoencoder/schema");
    expect(schema.status == 200 && schema.json()["plugin_id"] == "autoencoder", format!("schema: {}", schema.body))?;
    let missing = http.get("/api/plugins/train/nope/schema");
    expect(is_api_error(&missing.json(), 404, "not-found"), format!("unknown schema: {}", missing.body))?;

    let launch = http.post("/api/stages/crawl", &json!({"master_seed": 6, "index_url": corpus.to_str().unwrap()}));
    expect(launch.status == 202 && launch.json()["task_id"].is_string(), format!("crawl launch: {}", launch.body))?;
    let crawl = http.wait_task(launch.json()["task_id"].as_str().unwrap());
    expect(crawl["state"]["status"] == "succeeded", format!("crawl task {crawl}"))?;
    expect(missing_keys(&crawl, &["spec", "state"]).is_empty(), format!("task shape {crawl}"))?;
    http.wait_idle();

    let page = http.get("/api/packages?offset=5&limit=10").json();
    expect(
        page["total"] == 80 && page["items"].as_array().is_some_and(|a| a.len() == 10) && page["offset"] == 5,
        format!("package page {page}"),
    )?;
    let pid = page["items"][0]["package_id"].as_str().unwrap().to_string();
    let detail = http.get(&format!("/api/packages/{pid}")).json();
    expect(
        missing_keys(&detail, &["record", "features", "votes", "resolved_label"]).is_empty()
            && detail["features"]["apis"]["completed"] == true,
        format!("package detail {detail}"),
    )?;
    let vote = http.post(&format!("/api/packages/{pid}/votes"), &json!({"category": "game", "voter": "ann"}));
    expect(vote.status == 200 && vote.json()["resolved_label"]["category"] == "game", format!("vote: {}", vote.body))?;
    let bad_vote = http.post(&format!("/api/packages/{}/votes", content_id(b"nothing")), &json!({"category": "game", "voter": "ann"}));
    expect(is_api_error(&bad_vote.json(), 404, "not-found"), format!("vote on unknown package: {}", bad_vote.body))?;

    let index: Value = serde_json::from_slice(&std::fs::read(corpus.join("index.json")).unwrap()).unwrap();
    let file = std::fs::read(corpus.join(index["packages"][0]["file"].as_str().unwrap())).unwrap();
    let upload = http.post_multipart("/api/packages", &[("category", "tool"), ("uploader", "bob")], &file);
    expect(upload.status == 201 && upload.json()["package_id"].is_string(), format!("upload: {}", upload.body))?;
    let broken = http.post_multipart("/api/packages", &[("uploader", "bob")], b"not a zip");
    expect(broken.status == 400 && broken.json()["code"].is_string(), format!("broken upload: {}", broken.body))?;
    // the valid upload re-labels one package; put it back
    let upid = upload.json()["package_id"].as_str().unwrap().to_string();
    let original = index["packages"][0]["metadata_ref"].as_str().unwrap().to_string();
    let meta: Value = serde_json::from_slice(&std::fs::read(corpus.join(original)).unwrap()).unwrap();
    http.post(&format!("/api/packages/{upid}/votes"), &json!({"category": meta["category"], "voter": "fix"}));
    http.post(&format!("/api/packages/{pid}/votes"), &json!({"category": http.get(&format!("/api/packages/{pid}")).json()["record"]["metadata"]["category"], "voter": "ann"}));
    http.wait_idle();

    let run_stage = |stage: &str, body: Value| -> Result<String, String> {
        let r = http.post(&format!("/api/stages/{stage}"), &body);
        if r.status != 202 {
            return Err(format!("{stage} launch: {} {}", r.status, r.body));
        }
        let t = http.wait_task(r.json()["task_id"].as_str().unwrap());
        if t["state"]["status"] != "succeeded" {
            return Err(format!("{stage} task: {t}"));
        }
        Ok(t["state"]["outputs"][0].as_str().unwrap().to_string())
    };
    let sel = run_stage("select", json!({"master_seed": 6, "categories": CATEGORIES, "name": "all"}))?;
    let merged = run_stage("merge", json!({"master_seed": 6, "selected_dataset": sel, "name": "split", "train_fraction": 0.75}))?;
    let processed = run_stage(
        "preprocess",
        json!({"master_seed": 6, "merged_dataset": merged, "name": "scaled", "chain": [{"plugin_id": "minmax_scaler"}]}),
    )?;
    let model = run_stage(
        "train",
        json!({"master_seed": 6, "processed_dataset": processed, "algorithm_class": "classical",
               "algorithm_id": "knn", "model_name": "nn", "hyperparams": {"k": 1}}),
    )?;

    let datasets = http.get("/api/datasets").json();
    expect(datasets["items"].as_array().is_some_and(|a| a.len() == 3), format!("datasets {datasets}"))?;
    let models = http.get("/api/models").json();
    expect(
        models["items"].as_array().is_some_and(|a| a.len() == 1 && a[0]["model_id"] == model.as_str()),
        format!("models {models}"),
    )?;
    let eval = http.get(&format!("/api/models/{model}/evaluation")).json();
    expect(
        missing_keys(&eval, &["model_id", "classes", "test_accuracy", "confusion", "metrics", "points", "kmeans"]).is_empty()
            && eval["test_accuracy"] == 1.0,
        "evaluation shape".into(),
    )?;
    let focal = eval["points"][0]["package_id"].as_str().unwrap().to_string();
    let view = http.get(&format!("/api/models/{model}/prediction-view?dims=3&focal={focal}&k=4&show_incorrect=true")).json();
    expect(
        missing_keys(&view, &["model_id", "dims", "points", "arrows", "neighbors"]).is_empty()
            && view["neighbors"].as_array().is_some_and(|a| a.len() == 4)
            && view["points"][0]["coords"].as_array().is_some_and(|c| c.len() == 3),
        format!("prediction view {}", view.to_string().chars().take(400).collect::<String>()),
    )?;
    let bad_view = http.get(&format!("/api/models/{model}/prediction-view?dims=4"));
    expect(bad_view.status == 400, format!("dims=4 gave {}", bad_view.status))?;

    let xml = http.get_accept(&format!("/api/artifacts/{model}/provenance"), "application/xml");
    expect(xml.status == 200 && xml.body.starts_with("<provenance"), "provenance xml".into())?;
    let pj = http.get(&format!("/api/artifacts/{model}/provenance")).json();
    expect(pj["lineage"].as_array().is_some_and(|l| !l.is_empty()), "provenance json".into())?;

    let invalid = http.post(
        "/api/stages/train",
        &json!({"master_seed": 6, "processed_dataset": processed, "algorithm_class": "classical",
                "algorithm_id": "softmax_regression", "model_name": "",
                "hyperparams": {"learning_rate": 50, "epochs": -3}}),
    );
    let body = invalid.json();
    let named: BTreeSet<&str> = body["details"]
        .as_array()
        .map(|d| d.iter().filter_map(|f| f["name"].as_str()).collect())
        .unwrap_or_default();
    expect(
        is_api_error(&body, 400, "validation-error") && ["model_name", "learning_rate", "epochs"].iter().all(|f| named.contains(f)),
        format!("invalid train: {}", invalid.body),
    )?;
    let no_seed = http.post("/api/stages/select", &json!({"categories": ["game"], "name": "x"}));
    expect(
        is_api_error(&no_seed.json(), 400, "validation-error") && no_seed.body.contains("master_seed"),
        format!("missing master_seed: {}", no_seed.body),
    )?;
    let malformed = http.post_raw("/api/stages/select", "{not json");
    expect(is_api_error(&malformed.json(), 400, "parse-error"), format!("malformed: {}", malformed.body))?;

    let tasks = http.get("/api/tasks").json();
    expect(missing_keys(&tasks, &["counts", "workers", "recent", "tasks"]).is_empty(), "task snapshot".into())?;
    let done = tasks["tasks"][0]["task_id"].as_str().unwrap().to_string();
    let cancel = http.post(&format!("/api/tasks/{done}/cancel"), &json!({}));
    expect(is_api_error(&cancel.json(), 409, "conflict"), format!("cancel succeeded task: {}", cancel.body))?;
    let unknown = http.get("/api/tasks/nope");
    expect(is_api_error(&unknown.json(), 404, "not-found"), "unknown task".into())?;
    drop(server);
    Ok(format!("{checked} endpoint checks against a live server"))
}

fn main() {
    let mut shared = Shared {
        root: tempfile::tempdir().expect("temp dir"),
        reference: None,
    };
    let criteria: Vec<(&str, Box<dyn FnOnce(&mut Shared) -> Outcome>)> = vec![
        ("end-to-end determinism", Box::new(c1_determinism)),
        ("resumability", Box::new(c2_resumability)),
        ("orchestrator soundness", Box::new(|_| c3_orchestrator())),
        ("metrics oracle", Box::new(|_| c4_metrics())),
        ("gradient correctness", Box::new(|_| c5_gradients())),
        ("forced-accuracy corpus", Box::new(|s| c6_forced_accuracy(s))),
        ("stage-2 invariants", Box::new(|_| c7_stage2())),
        ("k-means", Box::new(|_| c8_kmeans())),
        ("provenance", Box::new(|_| c9_provenance())),
        ("API contract", Box::new(|s| c10_api(s))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&mut shared)))
            .unwrap_or_else(|p| {
                Err(p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()))
            });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 10 criteria passed");
}
