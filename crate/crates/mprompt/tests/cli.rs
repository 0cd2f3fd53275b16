//! End-to-end checks of the command-line interface: exit codes, file
//! formats, and byte-identical reruns. Uses a deliberately tiny corpus so
//! the whole pipeline finishes in seconds.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mprompt"))
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("spawn mprompt");
    assert!(
        out.status.success(),
        "mprompt {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bin().args(["gen-corpus", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_is_a_data_error() {
    let out = bin()
        .args(["cluster", "--data", "/nonexistent.jsonl", "--out", "/tmp/x.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(!out.stderr.is_empty());
}

#[test]
fn corpus_generation_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(&[
            "gen-corpus",
            "--out",
            out.to_str().unwrap(),
            "--per-domain",
            "24",
            "--seed",
            "5",
        ]);
    }
    for name in ["train.jsonl", "val.jsonl", "test.jsonl", "planted_labels.json"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name} differs"
        );
    }
}

/// One pass over every subcommand: gen-corpus -> pretrain -> cluster ->
/// train (twice, byte-compare) -> eval -> generate -> inspect-cka -> ablate.
#[test]
fn full_pipeline_via_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    run_ok(&[
        "gen-corpus",
        "--out",
        corpus.to_str().unwrap(),
        "--per-domain",
        "64",
        "--seed",
        "3",
    ]);
    let train_file = corpus.join("train.jsonl");
    let val_file = corpus.join("val.jsonl");
    let test_file = corpus.join("test.jsonl");

    let backbone = root.join("backbone");
    run_ok(&[
        "pretrain",
        "--data",
        train_file.to_str().unwrap(),
        "--val",
        val_file.to_str().unwrap(),
        "--out",
        backbone.to_str().unwrap(),
        "--d",
        "32",
        "--heads",
        "4",
        "--layers",
        "1",
        "--gen-d",
        "16",
        "--epochs",
        "2",
        "--lr",
        "0.003",
        "--seed",
        "9",
    ]);
    for name in ["model.ckpt", "vocab.json", "model.json"] {
        assert!(backbone.join(name).exists(), "{name} missing after pretrain");
    }

    let domains = root.join("domains.json");
    run_ok(&[
        "cluster",
        "--data",
        train_file.to_str().unwrap(),
        "--out",
        domains.to_str().unwrap(),
        "--n",
        "4",
        "--seed",
        "9",
    ]);
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&domains).unwrap()).unwrap();
    assert_eq!(parsed["n"], 4);
    assert_eq!(parsed["centroids"].as_array().unwrap().len(), 4);

    let cfg = root.join("tune.cfg");
    std::fs::write(
        &cfg,
        "n = 4\nt = 4\nrho = 4\nkappa = 4\nlr = 0.002\nepochs = 2\nbatch_size = 16\nseed = 1\nmax_ans_length = 8\n",
    )
    .unwrap();

    let tuned_a = root.join("tuned_a");
    let tuned_b = root.join("tuned_b");
    for out in [&tuned_a, &tuned_b] {
        run_ok(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            train_file.to_str().unwrap(),
            "--val",
            val_file.to_str().unwrap(),
            "--backbone",
            backbone.to_str().unwrap(),
            "--domains",
            domains.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    // identical flags, files and seed give byte-identical metric outputs
    assert_eq!(
        std::fs::read(tuned_a.join("metrics.jsonl")).unwrap(),
        std::fs::read(tuned_b.join("metrics.jsonl")).unwrap()
    );
    let log = std::fs::read_to_string(tuned_a.join("metrics.jsonl")).unwrap();
    for line in log.lines() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "train_nll", "train_idp", "val_metric", "mean_cka"] {
            assert!(row.get(key).is_some(), "metrics log missing {key}");
        }
    }

    let per_example = root.join("per_example.jsonl");
    let eval_out = run_ok(&[
        "eval",
        "--ckpt",
        tuned_a.to_str().unwrap(),
        "--data",
        test_file.to_str().unwrap(),
        "--out",
        per_example.to_str().unwrap(),
    ]);
    let scores: serde_json::Value = serde_json::from_str(eval_out.trim()).unwrap();
    for key in ["token_f1", "rouge_l", "exact_match", "n_examples"] {
        assert!(scores.get(key).is_some(), "eval output missing {key}");
    }
    let n_lines = std::fs::read_to_string(&per_example).unwrap().lines().count();
    assert_eq!(n_lines as u64, scores["n_examples"].as_u64().unwrap());

    // worker count must not change results
    let threaded = bin()
        .env("MPROMPT_THREADS", "4")
        .args([
            "eval",
            "--ckpt",
            tuned_a.to_str().unwrap(),
            "--data",
            test_file.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(threaded.status.success());
    let threaded: serde_json::Value =
        serde_json::from_str(String::from_utf8(threaded.stdout).unwrap().trim()).unwrap();
    assert_eq!(threaded, scores, "MPROMPT_THREADS changed eval output");

    let preds = run_ok(&[
        "generate",
        "--ckpt",
        tuned_a.to_str().unwrap(),
        "--data",
        test_file.to_str().unwrap(),
    ]);
    let first: serde_json::Value = serde_json::from_str(preds.lines().next().unwrap()).unwrap();
    assert!(first.get("id").is_some() && first.get("prediction").is_some());

    let cka = run_ok(&["inspect-cka", "--ckpt", tuned_a.to_str().unwrap()]);
    let cka: serde_json::Value = serde_json::from_str(cka.trim()).unwrap();
    assert_eq!(cka["n"], 4);
    let matrix = cka["cka"].as_array().unwrap();
    assert_eq!(matrix.len(), 4);
    for (i, row) in matrix.iter().enumerate() {
        let row = row.as_array().unwrap();
        assert_eq!(row.len(), 4);
        assert!((row[i].as_f64().unwrap() - 1.0).abs() < 1e-6, "diagonal");
    }

    // five-row ablation table on the same tiny setup
    let ablate_rows = root.join("ablate.jsonl");
    std::fs::write(
        root.join("ablate.cfg"),
        "n = 4\nt = 4\nrho = 4\nkappa = 4\nlr = 0.002\nepochs = 1\nbatch_size = 16\nseed = 1\nmax_ans_length = 8\n",
    )
    .unwrap();
    run_ok(&[
        "ablate",
        "--config",
        root.join("ablate.cfg").to_str().unwrap(),
        "--data",
        train_file.to_str().unwrap(),
        "--val",
        val_file.to_str().unwrap(),
        "--backbone",
        backbone.to_str().unwrap(),
        "--out",
        ablate_rows.to_str().unwrap(),
    ]);
    let rows: Vec<serde_json::Value> = std::fs::read_to_string(&ablate_rows)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let names: Vec<&str> = rows.iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "w/o d", "w/o c", "w/o idp", "w/o PG"]);
}

#[test]
fn random_cluster_assignment_flag() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    run_ok(&[
        "gen-corpus",
        "--out",
        corpus.to_str().unwrap(),
        "--per-domain",
        "16",
        "--seed",
        "2",
    ]);
    let out = dir.path().join("random.json");
    run_ok(&[
        "cluster",
        "--data",
        corpus.join("train.jsonl").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--n",
        "3",
        "--seed",
        "4",
        "--random",
    ]);
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(Path::new(&out)).unwrap()).unwrap();
    let labels: Vec<u64> = parsed["assignments"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert!(labels.iter().all(|&l| l < 3));
    // uniform random labels should hit more than one cluster
    let distinct: std::collections::BTreeSet<u64> = labels.iter().copied().collect();
    assert!(distinct.len() > 1);
}
