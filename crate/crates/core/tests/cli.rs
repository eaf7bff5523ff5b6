use std::path::Path;
use std::process::{Command, Output};

mod common;

use common::digest_tree;

fn pertnav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pertnav")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = pertnav(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    pertnav(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_world(dir: &Path) {
    ok(&["gen-world", "--out", s(dir), "--nodes", "16", "--radius", "9", "--extent", "30", "--scenes", "2", "--episodes", "8", "--val-episodes", "6", "--min-hops", "2", "--max-hops", "4", "--landmarks", "6"]);
}

#[test]
fn help_documents_every_flag() {
    let top = ok(&["--help"]);
    for sub in ["gen-world", "build-pp", "train", "eval"] {
        assert!(top.contains(sub));
    }
    let flags: [(&str, &[&str]); 4] = [
        ("gen-world", &["--out", "--config", "--nodes", "--radius", "--extent", "--landmarks", "--min-hops", "--max-hops", "--seed", "--scenes", "--episodes", "--val-episodes"]),
        ("build-pp", &["--data", "--split", "--connectivity", "--trajectories", "--out", "--stats", "--table"]),
        ("train", &["--data", "--split", "--out", "--mode", "--config", "--iterations", "--seed", "--batch-size", "--learning-rate", "--checkpoint-every", "--resume", "--stop-after"]),
        ("eval", &["--data", "--split", "--checkpoint", "--config", "--protocol", "--decode", "--seed", "--success-radius", "--max-steps", "--events", "--out"]),
    ];
    for (sub, wanted) in flags {
        let help = ok(&[sub, "--help"]);
        for f in wanted {
            assert!(help.contains(f), "{sub} --help is missing {f}");
        }
    }
}

#[test]
fn gen_world_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out = ok(&["gen-world", "--nodes", "40", "--episodes", "200", "--seed", "7", "--out", s(a.path())]);
    assert!(out.contains("train 200"));
    ok(&["gen-world", "--nodes", "40", "--episodes", "200", "--seed", "7", "--out", s(b.path())]);
    assert_eq!(digest_tree(a.path()), digest_tree(b.path()));
    ok(&["gen-world", "--nodes", "40", "--episodes", "200", "--seed", "7", "--out", s(a.path())]);
    assert_eq!(digest_tree(a.path()), digest_tree(b.path()));
}

#[test]
fn config_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("w");
    assert_eq!(code(&["gen-world", "--nodes", "5", "--min-hops", "3", "--max-hops", "9", "--out", s(&out)]), 1);
    assert!(!out.exists());
    assert_eq!(code(&["gen-world", "--bogus"]), 1);
    let cfg = d.path().join("c.json");
    std::fs::write(&cfg, r#"{"nodes": 20, "colour": "red"}"#).unwrap();
    assert_eq!(code(&["gen-world", "--config", s(&cfg), "--out", s(&out)]), 1);
    std::fs::write(&cfg, r#"{"weights": {"temperature": 0.0}}"#).unwrap();
    small_world(&out);
    assert_eq!(code(&["train", "--data", s(&out), "--out", s(&d.path().join("r")), "--config", s(&cfg)]), 1);
}

#[test]
fn build_pp_outputs_and_empty_split() {
    let d = tempfile::tempdir().unwrap();
    let w = d.path().join("w");
    small_world(&w);
    let pp = d.path().join("pp.json");
    let stats = d.path().join("stats.json");
    let table = d.path().join("stats.txt");
    let out = ok(&["build-pp", "--data", s(&w), "--split", "train", "--out", s(&pp), "--stats", s(&stats), "--table", s(&table)]);
    assert_eq!(out, std::fs::read_to_string(&table).unwrap());
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&pp).unwrap()).unwrap();
    assert_eq!(json["episodes"].as_array().unwrap().len(), 8);
    std::fs::write(w.join("empty.json"), "[]").unwrap();
    assert_eq!(code(&["build-pp", "--data", s(&w), "--split", "empty", "--out", s(&pp)]), 2);
    assert_eq!(code(&["build-pp", "--data", s(&w), "--split", "missing", "--out", s(&pp)]), 2);
}

#[test]
fn train_resume_and_eval() {
    let d = tempfile::tempdir().unwrap();
    let w = d.path().join("w");
    small_world(&w);
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    let common = ["--data", s(&w), "--iterations", "12", "--seed", "3", "--checkpoint-every", "4", "--batch-size", "3"];
    ok(&[&["train", "--out", s(&a)][..], &common].concat());
    ok(&[&["train", "--out", s(&b), "--stop-after", "5"][..], &common].concat());
    let partial = std::fs::read_to_string(b.join("loss.jsonl")).unwrap();
    assert_eq!(partial.lines().count(), 5);
    ok(&["train", "--data", s(&w), "--out", s(&b), "--resume", "--checkpoint-every", "4"]);
    assert_eq!(digest_tree(&a), digest_tree(&b));
    assert_eq!(std::fs::read_to_string(a.join("loss.jsonl")).unwrap().lines().count(), 12);

    let base = d.path().join("base");
    ok(&[&["train", "--out", s(&base), "--mode", "baseline"][..], &common].concat());
    let log = std::fs::read_to_string(base.join("loss.jsonl")).unwrap();
    assert!(log.lines().all(|l| l.contains("\"pool_size\":0")));
    assert_ne!(log, std::fs::read_to_string(a.join("loss.jsonl")).unwrap());

    let ck = a.join("checkpoint.json");
    let (r1, r2) = (d.path().join("r1.json"), d.path().join("r2.json"));
    let line = ok(&["eval", "--data", s(&w), "--checkpoint", s(&ck), "--protocol", "per-based", "--out", s(&r1)]);
    assert!(line.contains("SR"));
    ok(&["eval", "--data", s(&w), "--checkpoint", s(&ck), "--protocol", "per-based", "--out", s(&r2)]);
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    assert_eq!(code(&["eval", "--data", s(&w), "--checkpoint", s(&d.path().join("nope.json")), "--out", s(&r1)]), 2);
    assert_eq!(code(&["train", "--data", s(&w), "--out", s(&d.path().join("fresh")), "--resume"]), 2);
}

#[test]
fn non_finite_training_exits_with_three() {
    let d = tempfile::tempdir().unwrap();
    let w = d.path().join("w");
    small_world(&w);
    let out = pertnav(&["train", "--data", s(&w), "--out", s(&d.path().join("r")), "--iterations", "20", "--learning-rate", "1e300"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("non-finite loss at iteration"), "{err}");
}
