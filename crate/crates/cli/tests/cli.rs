use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"{
  "seed": 4,
  "synth": {"num_pairs": 120, "num_mono": 120},
  "prepare": {"min_count": 1, "valid_pairs": 15, "test_pairs": 15, "valid_mono": 15},
  "model": {"embed_dim": 6, "hidden_dim": 8, "num_layers": 1, "max_len": 12},
  "train": {"max_steps": 10, "eval_every": 5},
  "bt": {"iterations": 1, "phase": {"max_steps": 5, "eval_every": 5}},
  "decode": {"max_len": 8, "mmi_candidates": 5}
}"#;

fn dialbt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dialbt"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = dialbt(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["status"], "ok");
    v
}

fn error(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap()
}

/// Writes the config and runs synth, prepare and train-init into `dir`.
fn bootstrap(dir: &Path) {
    std::fs::write(dir.join("c.json"), CONFIG).unwrap();
    ok(dir, &["synth", "--config", "c.json", "--out", "syn"]);
    ok(dir, &["prepare", "--config", "c.json", "--out", "data", "--pairs", "syn/pairs.tsv", "--mono", "syn/mono.txt"]);
    ok(dir, &["train-init", "--config", "c.json", "--out", "init", "--data", "data"]);
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    bootstrap(dir);
    let c = ["--config", "c.json", "--data", "data"];
    let bt = ok(dir, &[&["bt", "--out", "bt", "--checkpoint", "init/init.ckpt"][..], &c].concat());
    assert_eq!(bt["fwd_ppl"].as_array().unwrap().len(), 2);
    ok(dir, &[&["train-lm", "--out", "lm"][..], &c].concat());
    ok(dir, &[&["train-disc", "--out", "disc"][..], &c].concat());
    ok(dir, &[&["train-multitask", "--out", "mt", "--mixing-ratio", "0.3"][..], &c].concat());
    for s in ["beam", "diverse", "nucleus", "fused", "mmi"] {
        let args = [
            &["decode", "--out", s, "--checkpoint", "bt/final.ckpt", "--strategy", s, "--lm", "lm/lm.ckpt"][..],
            &["--beam", "4", "--groups", "2"],
            &c,
        ]
        .concat();
        let v = ok(dir, &args);
        assert_eq!(v["responses"], 15);
        let tsv = std::fs::read_to_string(dir.join(s).join("decode.tsv")).unwrap();
        assert_eq!(tsv.lines().count(), 15);
    }
    let r = ok(dir, &[&["retrieve", "--out", "ret", "--checkpoint", "init/init.ckpt", "--k", "10"][..], &c].concat());
    assert_eq!(r["responses"], 15);
    let args = [
        &["eval", "--out", "ev", "--hyp", "ret/retrieve.tsv", "--ref", "data/test.tsv"][..],
        &["--checkpoint", "bt/final.ckpt", "--disc", "disc/disc.ckpt"],
        &c,
    ]
    .concat();
    let e = ok(dir, &args);
    assert_eq!(e["sample_count"], 15);
    assert!(e["dist1"].as_f64().unwrap() > 0.0);
    assert!(e["ppl"].as_f64().unwrap() > 1.0);
    let csv = std::fs::read_to_string(dir.join("ev/report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "label,bleu2,dist1,dist2,ent4,adver");
    for f in ["bt/iter0.ckpt", "bt/iter1.ckpt", "bt/trace.csv", "bt/config.json", "ev/report.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    assert!(!dir.join("bt/.dialbt.lock").exists());
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dialbt(tmp.path(), &["synth", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = dialbt(tmp.path(), &["decode", "--out", "d", "--data", "data"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error(&out)["category"], "usage");
}

#[test]
fn config_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.json"), r#"{"sed": 1}"#).unwrap();
    let out = dialbt(tmp.path(), &["synth", "--config", "bad.json", "--out", "o"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error(&out)["category"], "config");
    std::fs::write(tmp.path().join("neg.json"), r#"{"train": {"learning_rate": -1.0}}"#).unwrap();
    let out = dialbt(tmp.path(), &["train-init", "--config", "neg.json", "--out", "o", "--data", "d"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn runtime_errors_exit_1_with_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dialbt(tmp.path(), &["train-init", "--out", "o", "--data", "missing"]);
    assert_eq!(out.status.code(), Some(1));
    let e = error(&out);
    assert_eq!(e["status"], "error");
    assert_eq!(e["category"], "io");
    assert!(e["message"].as_str().unwrap().contains("missing"));
}

#[test]
fn locked_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::create_dir(tmp.path().join("o")).unwrap();
    std::fs::write(tmp.path().join("o/.dialbt.lock"), "").unwrap();
    let out = dialbt(tmp.path(), &["synth", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(tmp.path().join("o/.dialbt.lock").exists());
    assert!(!tmp.path().join("o/pairs.tsv").exists());
}

#[test]
fn checkpoint_from_other_vocabulary_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    bootstrap(dir);
    ok(dir, &["prepare", "--config", "c.json", "--out", "data2", "--pairs", "syn/pairs.tsv", "--mono", "syn/mono.txt", "--min-count", "30"]);
    let out = dialbt(dir, &["decode", "--config", "c.json", "--out", "d", "--data", "data2", "--checkpoint", "init/init.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error(&out)["message"].as_str().unwrap().contains("vocabulary"));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("c.json"), CONFIG).unwrap();
    ok(dir, &["synth", "--config", "c.json", "--out", "a", "--seed", "7"]);
    ok(dir, &["synth", "--config", "c.json", "--out", "b"]);
    let cfg: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("a/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 7);
    assert_eq!(cfg["train"]["rng_seed"], 7);
    assert_ne!(std::fs::read(dir.join("a/pairs.tsv")).unwrap(), std::fs::read(dir.join("b/pairs.tsv")).unwrap());
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let v = ok(tmp.path(), &["gradcheck", "--out", "g", "--seed", "3"]);
    assert!(v["worst_rel_error"].as_f64().unwrap() < 1e-4);
    assert!(tmp.path().join("g/gradcheck.json").exists());
}
