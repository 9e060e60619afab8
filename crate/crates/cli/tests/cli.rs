use std::path::Path;
use std::process::{Command, Output};

use cogcap_cli::{cli_main, render_report};
use cogcap_core::EvalReport;

const TINY: &str = r#"{
  "seed": 3,
  "data": {"n_concepts_train": 8, "n_images_per_concept": 2, "n_repetitions": 2,
           "n_concepts_test": 4, "n_test_repetitions": 2, "channels": 4, "snr": 8.0, "seed": 5},
  "encoder": {"channels": 4, "conv_channels": 4, "embed_dim": 16},
  "align": {"batch_size": 16, "epochs": 2},
  "prior": {"blocks": 1, "width_mult": 1, "batch_size": 16, "epochs": 2, "sample_steps": 5},
  "eval": {"bootstrap_resamples": 50}
}"#;

fn cogcap(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cogcap"))
        .args(args)
        .current_dir(cwd)
        .env("COGCAP_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) {
    let out = cogcap(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn full_run(dir: &Path) {
    std::fs::write(dir.join("c.json"), TINY).unwrap();
    ok(&["gen-data", "--config", "c.json", "--out", "d"], dir);
    ok(&["train-align", "--config", "c.json", "--dataset", "d", "--ckpt", "ck"], dir);
    ok(&["train-prior", "--dataset", "d", "--ckpt", "ck"], dir);
    ok(&["eval", "--dataset", "d", "--ckpt", "ck", "--out", "report.json"], dir);
}

#[test]
fn help_on_every_subcommand() {
    for sub in ["gen-data", "train-align", "train-prior", "eval", "attribute", "report", "sweep"] {
        assert_eq!(cli_main(["cogcap", sub, "--help"]), 0, "{sub}");
    }
    assert_eq!(cli_main(["cogcap", "--help"]), 0);
    let out = cogcap(&["eval", "--help"], Path::new("."));
    assert!(!out.stdout.is_empty());
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(cli_main(["cogcap", "frobnicate"]), 1);
    assert_eq!(cli_main(["cogcap", "gen-data", "--out", "x", "--bogus"]), 1);
    assert_eq!(cli_main(["cogcap", "eval"]), 1);
    assert_eq!(cli_main(["cogcap"]), 1);
}

#[test]
fn eval_without_checkpoints_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), TINY).unwrap();
    ok(&["gen-data", "--config", "c.json", "--out", "d"], dir.path());
    let out = cogcap(&["eval", "--dataset", "d", "--ckpt", "nothing", "--out", "r.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing checkpoint"));
}

#[test]
fn bad_config_and_thread_count_are_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"nonsense": true}"#).unwrap();
    assert_eq!(cogcap(&["gen-data", "--config", "c.json", "--out", "d"], dir.path()).status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_cogcap"))
        .args(["gen-data", "--out", "d"])
        .current_dir(dir.path())
        .env("COGCAP_THREADS", "0")
        .output()
        .unwrap();
    assert!(out.status.success(), "gen-data does not use threads");
    std::fs::write(dir.path().join("c.json"), TINY).unwrap();
    ok(&["gen-data", "--config", "c.json", "--out", "d"], dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_cogcap"))
        .args(["train-align", "--config", "c.json", "--dataset", "d", "--ckpt", "ck"])
        .current_dir(dir.path())
        .env("COGCAP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("COGCAP_THREADS"));
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_is_reproducible_byte_for_byte() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    full_run(a.path());
    full_run(b.path());
    let fa = read_all(a.path());
    assert!(fa.iter().any(|(n, _)| n == "report.json"));
    assert!(fa.iter().any(|(n, _)| n.ends_with("log.jsonl")));
    assert_eq!(fa, read_all(b.path()));

    // Same config and seed, different sampling seed: the report changes.
    ok(&["eval", "--dataset", "d", "--ckpt", "ck", "--out", "r2.json", "--seed", "9"], a.path());
    assert_ne!(
        std::fs::read(a.path().join("report.json")).unwrap(),
        std::fs::read(a.path().join("r2.json")).unwrap()
    );
}

#[test]
fn report_attribute_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    full_run(d);

    let out = cogcap(&["report", "--input", "report.json"], d);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(table, render_report(&report));
    let tokens: Vec<&str> = table.split_whitespace().collect();
    for field in [
        "config_hash",
        "seed",
        "data_seed",
        "n_queries",
        "n_candidates",
        "ci_level",
        "top1",
        "top5",
        "union_upper_bound",
        "direct_cosine",
        "prior_cosine",
        "pixcorr",
        "ssim",
        "two_way[image]",
        "two_way[text]",
        "two_way[depth]",
        "two_way_combined",
        "correlation_distance",
    ] {
        assert_eq!(tokens.iter().filter(|t| **t == field).count(), 1, "{field}");
    }

    ok(&["attribute", "--dataset", "d", "--ckpt", "ck", "--out", "sal.json"], d);
    let sal: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("sal.json")).unwrap()).unwrap();
    let maps = sal.as_array().unwrap();
    assert_eq!(maps.len(), 3);
    for m in maps {
        let ch: Vec<f64> = serde_json::from_value(m["channel_saliency"].clone()).unwrap();
        assert_eq!(ch.len(), 4);
        assert!((ch.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    ok(
        &["sweep", "--config", "c.json", "--dataset", "d", "--out", "sweep.json", "--batch-sizes", "8,16", "--lrs", "1e-3", "--epochs", "1"],
        d,
    );
    let sweep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("sweep.json")).unwrap()).unwrap();
    let points = sweep.as_array().unwrap();
    assert_eq!(points.len(), 2);
    assert_eq!(points[0]["batch_size"], 8);
    assert_eq!(points[1]["batch_size"], 16);
}

#[test]
fn checkpoint_from_other_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    full_run(d);
    let other = TINY.replace("\"seed\": 3", "\"seed\": 4");
    std::fs::write(d.join("other.json"), other).unwrap();
    let out = cogcap(&["eval", "--config", "other.json", "--dataset", "d", "--ckpt", "ck", "--out", "r.json"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint mismatch"));
}
