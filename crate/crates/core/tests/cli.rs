use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn framesel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_framesel"))
        .args(args)
        .output()
        .expect("spawn framesel")
}

fn json_lines(bytes: &[u8]) -> Vec<Value> {
    String::from_utf8_lossy(bytes)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("bad JSON line {l:?}: {e}")))
        .collect()
}

fn single_error_line(out: &Output) -> Value {
    assert!(!out.status.success());
    assert!(out.stdout.is_empty(), "errors must not reach stdout");
    let lines = json_lines(&out.stderr);
    assert_eq!(lines.len(), 1, "{}", String::from_utf8_lossy(&out.stderr));
    lines.into_iter().next().unwrap()
}

const SMALL: &[&str] = &[
    "--videos", "12", "--frames", "10", "--cluster", "3", "--d-v", "8", "--d-t", "4", "--options", "3",
];
const HIDDEN: &[&str] = &["--d-h", "6", "--d-p", "4"];

fn gen_small(dir: &Path, seed: &str) -> String {
    let out_dir = dir.to_str().unwrap();
    let mut args = vec!["gen", "--out", out_dir, "--seed", seed];
    args.extend_from_slice(SMALL);
    let out = framesel(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = json_lines(&out.stdout);
    lines[0]["manifest"].as_str().unwrap().to_string()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn select_from_explicit_scores() {
    let out = framesel(&["select", "--scores", "0.1,0.9,0.5,0.7", "--k", "2", "--deterministic"]);
    assert!(out.status.success());
    let lines = json_lines(&out.stdout);
    assert_eq!(lines[0]["selection"]["indices"], serde_json::json!([1, 3]));
    assert_eq!(lines[0]["selection"]["mode"], "inference");
}

#[test]
fn oversized_k_fails_with_reason() {
    let out = framesel(&["select", "--scores", "0.1,0.2", "--k", "3", "--deterministic"]);
    let e = single_error_line(&out);
    assert_eq!(e["error"], "contract");
    assert!(e["message"].as_str().unwrap().contains("exceeds frame count"));
}

#[test]
fn unknown_flag_is_a_one_line_usage_error() {
    let out = framesel(&["train", "--bogus"]);
    let e = single_error_line(&out);
    assert_eq!(e["error"], "usage");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = framesel(&["eval", "--manifest", missing.to_str().unwrap()]);
    let e = single_error_line(&out);
    assert!(e["message"].as_str().unwrap().contains("manifest not found"));
}

#[test]
fn gen_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen_small(a.path(), "5");
    gen_small(b.path(), "5");
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.iter().any(|(n, _)| n == "manifest.json"));
    assert_eq!(ta, tb);
}

#[test]
fn train_select_eval_round_trip() {
    let data = tempfile::tempdir().unwrap();
    let manifest = gen_small(data.path(), "1");
    let snaps = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut streams = Vec::new();
    for s in &snaps {
        let mut args = vec![
            "train", "--manifest", &manifest, "--out", s.path().to_str().unwrap(), "--k", "3",
            "--epochs", "2", "--batch-size", "4", "--seed", "4",
        ];
        args.extend_from_slice(HIDDEN);
        let out = framesel(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        streams.push(out.stdout);
    }
    let steps = |bytes: &[u8]| -> Vec<Value> {
        json_lines(bytes).into_iter().filter(|l| l["event"] == "step").collect()
    };
    assert_eq!(steps(&streams[0]), steps(&streams[1]));
    assert_eq!(tree(snaps[0].path()), tree(snaps[1].path()));
    let lines = json_lines(&streams[0]);
    assert_eq!(lines.iter().filter(|l| l["event"] == "step").count(), 6);
    assert!(lines[0]["report"]["scorer_grad_norm"].as_f64().unwrap() > 0.0);
    assert_eq!(lines.last().unwrap()["event"], "snapshot");

    let model = snaps[0].path().to_str().unwrap();
    let out = framesel(&["select", "--manifest", &manifest, "--model", model, "--k-prime", "2", "--deterministic"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sel = json_lines(&out.stdout);
    assert_eq!(sel.len(), 12);
    for l in &sel {
        assert_eq!(l["selection"]["indices"].as_array().unwrap().len(), 2);
        assert_eq!(l["scores"]["aggregate"].as_array().unwrap().len(), 10);
    }

    let out = framesel(&["select", "--manifest", &manifest, "--model", model, "--k", "3", "--seed", "9"]);
    assert!(out.status.success());
    let sel = json_lines(&out.stdout);
    assert_eq!(sel[0]["selection"]["mode"], "train-stochastic");
    assert_eq!(sel[0]["selection"]["seed"], 9);

    let out = framesel(&["eval", "--manifest", &manifest, "--model", model, "--k-prime", "3"]);
    assert!(out.status.success());
    let m = &json_lines(&out.stdout)[0]["metrics"];
    for key in ["keyframe_recall", "answer_accuracy"] {
        let v = m[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn gradcheck_passes() {
    let out = framesel(&["gradcheck", "--k", "3", "--tau", "0.5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = &json_lines(&out.stdout)[0]["report"];
    assert_eq!(r["passed"], true);
    assert_eq!(r["params"].as_array().unwrap().len(), 10);
}

#[test]
fn ablate_emits_a_paired_table() {
    let mut args = vec![
        "ablate", "--seeds", "1,2", "--test-videos", "4", "--epochs", "1", "--k", "3", "--batch-size", "4",
    ];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(HIDDEN);
    let out = framesel(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = json_lines(&out.stdout);
    assert_eq!(lines.iter().filter(|l| l["event"] == "result").count(), 12);
    let table = lines.last().unwrap();
    assert_eq!(table["paired"], true);
    assert_eq!(table["table"]["rows"].as_array().unwrap().len(), 6);
    assert!(String::from_utf8_lossy(&out.stderr).contains("w/o QFM"));
}
