mod common;

use std::path::Path;

use serde_json::{json, Value};

use common::{caravan, generate_corpus, stderr, stdout};

fn run(config: &Path, data_dir: &Path) -> std::process::Output {
    caravan(&["run", "--config", config.to_str().unwrap(), "--data-dir", data_dir.to_str().unwrap()])
}

fn knn_config(corpus: &Path) -> Value {
    json!({
        "master_seed": 11,
        "crawl": {"index_url": corpus.to_str().unwrap()},
        "select": {"categories": ["a", "b"], "name": "all"},
        "merge": {"name": "split"},
        "preprocess": {"name": "scaled", "chain": [{"plugin_id": "minmax_scaler"}]},
        "train": {"algorithm_class": "classical", "algorithm_id": "knn", "model_name": "nn", "hyperparams": {"k": 1}}
    })
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn corpus_generation_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(&dir.path().join("one"), 12, "a,b,c", 3);
    generate_corpus(&dir.path().join("two"), 12, "a,b,c", 3);
    generate_corpus(&dir.path().join("other"), 12, "a,b,c", 4);
    let one = read_tree(&dir.path().join("one"));
    assert!(one.iter().any(|(name, _)| name == "index.json"));
    assert_eq!(one, read_tree(&dir.path().join("two")));
    assert_ne!(one, read_tree(&dir.path().join("other")));
}

#[test]
fn run_prints_the_pipeline_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    generate_corpus(&corpus, 10, "a,b", 1);
    let config = dir.path().join("run.json");
    std::fs::write(&config, knn_config(&corpus).to_string()).unwrap();
    let out = run(&config, &dir.path().join("data"));
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["packages"], 10);
    for key in ["selected_dataset", "merged_dataset", "processed_dataset", "model", "evaluation"] {
        assert_eq!(summary[key].as_str().map(str::len), Some(64), "{key}");
    }

    let model = summary["model"].as_str().unwrap();
    let data = dir.path().join("data");
    let xml = caravan(&["provenance", "export", "--artifact", model, "--data-dir", data.to_str().unwrap()]);
    assert!(xml.status.success());
    assert!(stdout(&xml).starts_with("<provenance"));
    let js = caravan(&[
        "provenance",
        "export",
        "--artifact",
        model,
        "--format",
        "json",
        "--data-dir",
        data.to_str().unwrap(),
    ]);
    let v: Value = serde_json::from_str(&stdout(&js)).unwrap();
    assert_eq!(v["artifact"], model);
    assert!(v["lineage"].as_array().unwrap().len() > 10);

    let again = run(&config, &data);
    assert!(again.status.success());
    assert_eq!(stdout(&again), stdout(&out));
}

#[test]
fn unknown_plugin_exits_with_one_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = knn_config(&dir.path().join("missing"));
    config["preprocess"]["chain"][0]["plugin_id"] = json!("wavelet_magic");
    let path = dir.path().join("run.json");
    std::fs::write(&path, config.to_string()).unwrap();
    let out = run(&path, &dir.path().join("data"));
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("preprocess.chain[0].plugin_id"), "{err}");
    assert!(err.contains("wavelet_magic"), "{err}");
}

#[test]
fn malformed_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(&path, "{ master_seed: ").unwrap();
    let out = run(&path, &dir.path().join("data"));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn execution_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = knn_config(&dir.path().join("no-such-corpus"));
    let path = dir.path().join("run.json");
    std::fs::write(&path, config.to_string()).unwrap();
    let out = run(&path, &dir.path().join("data"));
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error: "));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(caravan(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(caravan(&["run", "--config", "x.json"]).status.code(), Some(1));
    assert_eq!(caravan(&["--help"]).status.code(), Some(0));
}

#[test]
fn exporting_an_unknown_artifact_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = "0".repeat(64);
    let out = caravan(&["provenance", "export", "--artifact", &missing, "--data-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let bad = caravan(&["provenance", "export", "--artifact", "xyz", "--data-dir", dir.path().to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
}
