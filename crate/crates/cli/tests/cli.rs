use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn taxonnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taxonnet"))
        .args(args)
        .env("TAXONNET_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = taxonnet(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small synthetic dataset and a briefly trained depth-2 checkpoint.
fn trained(dir: &Path) -> (String, String) {
    let spec = dir.join("synth.toml");
    std::fs::write(&spec, "depth = 2\nlatent_dim = 2\nper_leaf = 20\n").unwrap();
    let cfg = dir.join("train.toml");
    std::fs::write(
        &cfg,
        "depth = 2\nlatent_dim = 2\narchitecture = \"linear_feature\"\n\
         likelihood = \"gaussian_unit_variance\"\nbatch_size = 16\nepochs = 2\n",
    )
    .unwrap();
    let data = dir.join("data");
    ok(&["synth", "--config", p(&spec), "--out", p(&data)]);
    let run = dir.join("run");
    let feats = data.join("data.bin");
    ok(&["train", "--config", p(&cfg), "--data", p(&feats), "--out", p(&run)]);
    (run.to_str().unwrap().into(), feats.to_str().unwrap().into())
}

#[test]
fn missing_required_flag_prints_usage() {
    let out = taxonnet(&["train"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--config") && err.contains("Usage"), "{err}");
}

#[test]
fn unknown_flag_is_rejected_by_every_subcommand() {
    for sub in ["train", "assign", "eval", "export-tree", "sample", "prototypes", "synth"] {
        let out = taxonnet(&[sub, "--no-such-flag"]);
        assert!(!out.status.success(), "{sub}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{sub}");
    }
}

#[test]
fn failed_train_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("never");
    let out = taxonnet(&["train", "--config", p(&dir.path().join("absent.toml")), "--out", p(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert!(!out_dir.exists());
}

#[test]
fn exported_tree_lists_every_node() {
    let dir = tempfile::tempdir().unwrap();
    let (run, _) = trained(dir.path());
    let json: Value = serde_json::from_str(&ok(&["export-tree", "--checkpoint", &run])).unwrap();
    let nodes = json["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), 7);
    assert!(nodes.iter().enumerate().all(|(i, n)| n["heap_index"] == i));

    let dot = ok(&["export-tree", "--checkpoint", &run, "--format", "dot"]);
    assert!(dot.starts_with("digraph"));
    assert_eq!(dot.matches("->").count(), 6);
}

#[test]
fn leaves_first_ordering_is_a_permutation_with_leaves_in_front() {
    let dir = tempfile::tempdir().unwrap();
    let (run, _) = trained(dir.path());
    let json: Value =
        serde_json::from_str(&ok(&["export-tree", "--checkpoint", &run, "--ordering", "leaves-first"])).unwrap();
    let nodes = json["nodes"].as_array().unwrap();
    let mut heap: Vec<u64> = nodes.iter().map(|n| n["heap_index"].as_u64().unwrap()).collect();
    assert!(nodes[..4].iter().all(|n| n["is_leaf"] == true));
    assert_eq!(nodes[6]["heap_index"], 0);
    heap.sort();
    assert_eq!(heap, (0..7).collect::<Vec<_>>());
}

#[test]
fn samples_have_the_requested_count_and_repeat_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (run, _) = trained(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    ok(&["sample", "--checkpoint", &run, "--n", "5", "--seed", "3", "--format", "csv", "--out", p(&a)]);
    ok(&["sample", "--checkpoint", &run, "--n", "5", "--seed", "3", "--format", "csv", "--out", p(&b)]);
    ok(&["sample", "--checkpoint", &run, "--n", "5", "--seed", "4", "--format", "csv", "--out", p(&c)]);
    let read = |d: &Path| std::fs::read_to_string(d.join("samples.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    // header plus one line per sample
    assert_eq!(read(&a).lines().count(), 6);
}

#[test]
fn pinned_node_labels_every_sample() {
    let dir = tempfile::tempdir().unwrap();
    let (run, _) = trained(dir.path());
    let out = dir.path().join("s");
    ok(&["sample", "--checkpoint", &run, "--n", "4", "--node", "5", "--format", "csv", "--out", p(&out)]);
    let text = std::fs::read_to_string(out.join("latents.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",5")), "{text}");
}

#[test]
fn prototypes_reject_nodes_outside_the_tree() {
    let dir = tempfile::tempdir().unwrap();
    let (run, data) = trained(dir.path());
    let out = dir.path().join("protos");
    let res = taxonnet(&["prototypes", "--checkpoint", &run, "--data", &data, "--node", "2,7", "--out", p(&out)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("node 7"));
    assert!(!out.join("prototypes.json").exists());

    ok(&["prototypes", "--checkpoint", &run, "--data", &data, "--node", "0,6", "--k", "3", "--out", p(&out)]);
    let json: Value = serde_json::from_str(&std::fs::read_to_string(out.join("prototypes.json")).unwrap()).unwrap();
    let found = json.as_array().unwrap();
    assert_eq!(found.len(), 2);
    let dens: Vec<f64> = found[1]["log_density"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(dens.len(), 3);
    assert!(dens.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn eval_is_reproducible_and_label_maps_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let (run, data) = trained(dir.path());
    let table = dir.path().join("t.assign");
    ok(&["assign", "--checkpoint", &run, "--data", &data, "--out", p(&table)]);
    let first = ok(&["eval", p(&table), p(&table)]);
    assert_eq!(first, ok(&["eval", p(&table), p(&table)]));

    let short = dir.path().join("short.map");
    std::fs::write(&short, "0 1").unwrap();
    assert!(!taxonnet(&["eval", p(&table), p(&table), "--labels", p(&short)]).status.success());
}
