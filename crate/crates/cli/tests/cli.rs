use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vidistill"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, classes: usize, seed: u64) -> PathBuf {
    let o = run(&[
        "synth", "--out", s(dir), "--classes", &classes.to_string(), "--per-class", "4", "--frames", "8", "--size", "16",
        "--seed", &seed.to_string(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("manifest.json")
}

fn tiny_config(dir: &Path, epochs: usize) -> PathBuf {
    let cfg = json!({
        "model": {"embed_dim": 16, "depth": 2, "heads": 2, "mlp_ratio": 2,
                  "proj_hidden": 16, "proj_bottleneck": 8, "proj_out": 32},
        "view": {"k_g": 4, "k_l_choices": [2, 4], "n_lt": 1, "q": 2,
                 "global_size": [16, 16], "local_size": [8, 8]},
        "train": {"epochs": epochs, "batch_size": 2, "warmup_epochs": 1, "checkpoint_every": 1},
        "probe": {"epochs": 20, "batch_size": 4,
                  "local_views": [{"frames": 2, "size": [16, 16]}, {"frames": 4, "size": [8, 8]}]}
    });
    let path = dir.join(format!("tiny_{epochs}.json"));
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn pretrain(cfg: &Path, data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["pretrain", "--config", s(cfg), "--data", s(data), "--out", s(out)];
    args.extend_from_slice(extra);
    run(&args)
}

fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn synth_writes_manifest_and_is_seeded() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("a"), 3, 1);
    let entries: Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(entries.as_array().unwrap().len(), 12);
    for e in entries.as_array().unwrap() {
        assert!(manifest.parent().unwrap().join(e["file"].as_str().unwrap()).exists());
    }
    synth(&tmp.path().join("b"), 3, 1);
    let a = dir_digest(&tmp.path().join("a"));
    let b = dir_digest(&tmp.path().join("b"));
    assert_eq!(a.len(), 13);
    assert_eq!(a.iter().map(|f| &f.1).collect::<Vec<_>>(), b.iter().map(|f| &f.1).collect::<Vec<_>>());
    synth(&tmp.path().join("c"), 3, 2);
    assert_ne!(a, dir_digest(&tmp.path().join("c")));
}

#[test]
fn synth_rejects_a_single_class() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--out", s(tmp.path()), "--classes", "1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--classes"), "{}", stderr(&o));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["pretrain", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert_eq!(code(&run(&["frobnicate"])), 2);

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"lr": 1}, "model": {"depth": 2, "width": 3}}"#).unwrap();
    let o = run(&["pretrain", "--config", s(&bad), "--data", s(tmp.path()), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("train.lr") && err.contains("model.width"), "{err}");
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["pretrain", "--data", s(&tmp.path().join("nope")), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_on_tiny_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("data"), 2, 0);
    let cfg = tiny_config(tmp.path(), 2);
    let o = run(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report["global_max_rel_error"].as_f64().unwrap() < 1e-4);
    assert!(!report["per_param"].as_object().unwrap().is_empty());
}

#[test]
fn pretrain_is_deterministic_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("data"), 2, 0);
    let cfg = tiny_config(tmp.path(), 2);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = pretrain(&cfg, &data, out, &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let log_a = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(log_a, fs::read_to_string(b.join("metrics.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(b.join("final.ckpt")).unwrap());
    let lines: Vec<&str> = log_a.lines().collect();
    assert_eq!(lines.len(), 6);

    let threaded = tmp.path().join("threaded");
    let o = pretrain(&cfg, &data, &threaded, &["--threads", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(log_a, fs::read_to_string(threaded.join("metrics.jsonl")).unwrap());

    let resumed = tmp.path().join("resumed");
    let ck = a.join("epoch_0001.ckpt");
    let o = pretrain(&cfg, &data, &resumed, &["--resume", s(&ck)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tail = fs::read_to_string(resumed.join("metrics.jsonl")).unwrap();
    assert_eq!(tail.lines().collect::<Vec<_>>(), lines[3..]);
    let first: Value = serde_json::from_str(tail.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 3);
    assert_eq!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(resumed.join("final.ckpt")).unwrap());
}

#[test]
fn probe_eval_and_attention_export() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("data"), 2, 0);
    let cfg = tiny_config(tmp.path(), 2);
    let out = tmp.path().join("run");
    assert_eq!(code(&pretrain(&cfg, &data, &out, &[])), 0);
    let ck = out.join("final.ckpt");

    let head = tmp.path().join("head.json");
    let report_log = tmp.path().join("reports.jsonl");
    let o = run(&[
        "probe", "--ckpt", s(&ck), "--data", s(&data), "--head-out", s(&head), "--report", s(&report_log),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    for key in ["mca", "mpca", "confusion"] {
        assert!(report.get(key).is_some(), "{key} missing");
    }
    let recorded: Value = serde_json::from_str(&fs::read_to_string(&head).unwrap()).unwrap();
    assert_eq!(recorded["test_report"], report);

    let o = run(&["eval", "--ckpt", s(&ck), "--data", s(&data), "--head", s(&head), "--report", s(&report_log)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let again: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(again["mca"].as_f64().unwrap().to_bits(), report["mca"].as_f64().unwrap().to_bits());
    assert_eq!(fs::read_to_string(&report_log).unwrap().lines().count(), 2);

    let multi = tmp.path().join("multi.json");
    let o = run(&["probe", "--ckpt", s(&ck), "--data", s(&data), "--head-out", s(&multi), "--multi-view"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let recorded: Value = serde_json::from_str(&fs::read_to_string(&multi).unwrap()).unwrap();
    assert_eq!(recorded["mode"], "multi");

    let other = synth(&tmp.path().join("three"), 3, 0);
    let o = run(&["eval", "--ckpt", s(&ck), "--data", s(&other), "--head", s(&head)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("classes"), "{}", stderr(&o));

    let video = tmp.path().join("data/videos/converge_0000.spvd");
    let maps = tmp.path().join("attn.spvd");
    let o = run(&["attn", "--ckpt", s(&ck), "--video", s(&video), "--out", s(&maps)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = vidistill_core::io::read_tensor(&maps).unwrap();
    assert_eq!(t.shape(), &[4, 2, 2]);
    for frame in t.data().chunks(4) {
        let sum: f32 = frame.iter().sum();
        assert!(sum > 0.0 && sum <= 1.0 + 1e-6, "{sum}");
    }
    let o = run(&["attn", "--ckpt", s(&ck), "--video", s(&video), "--out", s(&maps), "--layer", "2"]);
    assert_eq!(code(&o), 2);

    let emb = tmp.path().join("emb.bin");
    let o = run(&["embed", "--ckpt", s(&ck), "--data", s(&data), "--split", "test", "--out", s(&emb)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = vidistill_core::probe::read_embeddings(&emb).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].2.len(), 16);
}
