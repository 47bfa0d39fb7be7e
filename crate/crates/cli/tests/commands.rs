use std::path::Path;
use std::process::{Command, Output};

use emodynamix::corpus::{write_corpus, Dialogue, Role, StrategySet, Turn};
use emodynamix::model::{Model, ModelConfig};
use emodynamix::metrics::StdKind;
use emodynamix::train::{report_from_predictions, save_model, Prediction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emodynamix"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is json")
}

fn code(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = run(dir, args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// A synthetic workspace under `syn/` with `total_steps` replaced.
fn synth_workspace(dir: &Path, dialogues: usize, steps: usize) {
    ok(dir, &["synth", "--out", "syn", "--seed", "11", "--dialogues", &dialogues.to_string()]);
    let cfg = dir.join("syn/config.toml");
    let text = std::fs::read_to_string(&cfg).unwrap();
    assert!(text.contains("total_steps = 1000"));
    let text = text
        .replace("total_steps = 1000", &format!("total_steps = {steps}"))
        .replace("warmup_steps = 50", &format!("warmup_steps = {}", steps.min(50) / 5));
    std::fs::write(&cfg, text).unwrap();
}

#[test]
fn ingest_writes_samples_and_histograms() {
    let dir = tempfile::tempdir().unwrap();
    synth_workspace(dir.path(), 50, 10);
    let s = ok(dir.path(), &["ingest", "--config", "syn/config.toml", "--out", "ing"]);
    let manifest = read_json(&dir.path().join("ing/manifest.json"));
    assert_eq!(s["total_samples"], manifest["total_samples"]);
    let mut total = 0;
    for split in ["train", "dev", "test"] {
        let info = &manifest["splits"][split];
        let path = dir.path().join(format!("ing/samples/{split}.jsonl"));
        let n = std::fs::read_to_string(path).unwrap().lines().count() as u64;
        assert_eq!(info["samples"].as_u64().unwrap(), n);
        let hist: u64 = info["histogram"]
            .as_object()
            .unwrap()
            .values()
            .map(|v| v.as_u64().unwrap())
            .sum();
        assert_eq!(hist, n);
        total += n;
    }
    assert_eq!(manifest["total_samples"].as_u64().unwrap(), total);
    assert_eq!(manifest["splits"]["train"]["dialogues"], 40);
    assert_eq!(s["config"]["out"], "ing");
    assert_eq!(s["config"]["train"]["warmup_steps"], 2);
}

#[test]
fn ingest_split_is_deterministic_under_seed() {
    let dir = tempfile::tempdir().unwrap();
    synth_workspace(dir.path(), 60, 10);
    let splits = |out: &str, seed: &str| {
        ok(dir.path(), &["ingest", "--config", "syn/config.toml", "--out", out, "--seed", seed]);
        read_json(&dir.path().join(out).join("manifest.json"))["splits"].clone()
    };
    assert_eq!(splits("a", "7"), splits("b", "7"));
    assert_ne!(splits("a", "7"), splits("c", "8"));
}

#[test]
fn single_dialogue_gives_one_train_sample_and_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let set = StrategySet::esconv();
    let d = Dialogue {
        id: "only".into(),
        turns: vec![
            Turn { role: Role::User, text: "I feel so alone".into(), strategy: None },
            Turn { role: Role::Agent, text: "Why is that?".into(), strategy: Some(0) },
        ],
    };
    write_corpus(&dir.path().join("one.jsonl"), &[d], &set).unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "strategies = \"esconv\"\n[corpus]\nschema = \"generic\"\npath = \"one.jsonl\"\nsplit = [1, 0, 0]\n",
    )
    .unwrap();
    let s = ok(dir.path(), &["ingest", "--config", "run.toml"]);
    assert_eq!(s["splits"]["train"]["samples"], 1);
    assert_eq!(s["splits"]["dev"]["samples"], 0);
    assert_eq!(s["splits"]["test"]["samples"], 0);
    assert_eq!(s["warnings"].as_array().unwrap().len(), 2);
}

#[test]
fn train_eval_trace_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    synth_workspace(dir.path(), 80, 60);
    let t = ok(dir.path(), &["train", "--config", "syn/config.toml", "--threads", "1"]);
    let run_dir = dir.path().join("syn/run");
    for f in ["best.ckpt", "final.ckpt", "train_log.jsonl", "test_report.json", "train_summary.json"] {
        assert!(run_dir.join(f).is_file(), "{f} missing");
    }
    assert_eq!(t["config"]["train"]["threads"], 1);
    assert_eq!(t["config"]["model"]["n_strategies"], 5);

    let e = ok(dir.path(), &["eval", "--config", "syn/config.toml"]);
    assert_eq!(e["macro_f1"], t["test"]["macro_f1"]);
    assert_eq!(e["bias"], t["test"]["bias"]);
    let preds = std::fs::read_to_string(run_dir.join("predictions_test.jsonl")).unwrap();
    assert_eq!(preds.lines().count() as u64, e["n_samples"].as_u64().unwrap());

    let tr = ok(dir.path(), &["trace", "--config", "syn/config.toml", "--dot", "--split", "dev"]);
    let n = tr["samples"].as_u64().unwrap();
    let traces = std::fs::read_to_string(run_dir.join("traces_dev.jsonl")).unwrap();
    assert_eq!(traces.lines().count() as u64, n);
    for line in traces.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        for layer in v["layers"].as_array().unwrap() {
            let s: f64 = layer.as_array().unwrap().iter().map(|e| e["alpha"].as_f64().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
    assert_eq!(std::fs::read_dir(run_dir.join("dot")).unwrap().count() as u64, n);
    assert!(run_dir.join("disagreement_dev.csv").is_file());
}

#[test]
fn reruns_reproduce_artifacts_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    synth_workspace(dir.path(), 40, 30);
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        ok(dir.path(), &["train", "--config", "syn/config.toml", "--threads", "1"]);
        let r = dir.path().join("syn/run");
        snapshots.push(
            ["best.ckpt", "final.ckpt", "train_log.jsonl", "train_summary.json"]
                .map(|f| std::fs::read(r.join(f)).unwrap()),
        );
    }
    assert!(snapshots[0] == snapshots[1]);
}

#[test]
fn ablate_keeps_full_model_on_top() {
    let dir = tempfile::tempdir().unwrap();
    synth_workspace(dir.path(), 300, 400);
    let s = ok(dir.path(), &["ablate", "--config", "syn/config.toml"]);
    let rows = s["variants"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "no_graph", "no_mixed_emotion", "no_discourse", "no_dummy"]);
    let f1 = |r: &Value| r["test"]["macro_f1"].as_f64().unwrap();
    let full = f1(&rows[0]);
    for r in &rows[1..] {
        assert!(full >= f1(r), "{} beat the full model: {} > {full}", r["variant"], f1(r));
    }
    for n in &names {
        assert!(dir.path().join("syn/run/ablate").join(n).join("test_report.json").is_file());
    }
    let csv = std::fs::read_to_string(dir.path().join("syn/run/ablate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn tau_sweep_fills_every_row() {
    let dir = tempfile::tempdir().unwrap();
    synth_workspace(dir.path(), 60, 20);
    let s = ok(dir.path(), &["tau-sweep", "--config", "syn/config.toml", "--taus", "0.1,0.5,1,2"]);
    let rows = s["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for (r, tau) in rows.iter().zip([0.1, 0.5, 1.0, 2.0]) {
        assert_eq!(r["tau_init"].as_f64().unwrap(), tau);
        assert!(r["learned_tau"].as_f64().unwrap() > 0.0);
        for m in ["macro_f1", "weighted_f1", "bias", "accuracy"] {
            assert!(r["test"][m].as_f64().unwrap().is_finite(), "{m} missing");
        }
    }
    let csv = std::fs::read_to_string(dir.path().join("syn/run/tau_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(!csv.contains(",,"));
}

/// Balanced 8-class corpus: every dialogue is one user turn and one agent
/// turn, strategies cycling through the set.
fn balanced_corpus(dir: &Path, per_class: usize) {
    let set = StrategySet::esconv();
    let words = ["sad", "happy", "job", "friend", "tired", "angry", "school", "family", "lonely", "worried"];
    let dialogues: Vec<Dialogue> = (0..per_class * set.len())
        .map(|i| Dialogue {
            id: format!("b{i:04}"),
            turns: vec![
                Turn {
                    role: Role::User,
                    text: format!("{} {} {}", words[i % 10], words[(i / 10) % 10], words[(i * 7 + 3) % 10]),
                    strategy: None,
                },
                Turn { role: Role::Agent, text: "ok".into(), strategy: Some(i % set.len()) },
            ],
        })
        .collect();
    write_corpus(&dir.join("balanced.jsonl"), &dialogues, &set).unwrap();
    std::fs::write(
        dir.join("balanced.toml"),
        "[corpus]\nschema = \"esconv\"\npath = \"balanced.jsonl\"\nsplit = [0, 0, 1]\n[model]\nd_ctx = 64\n",
    )
    .unwrap();
}

#[test]
fn uniform_random_predictions_fall_in_chance_band() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let labels: Vec<String> = (0..8).map(|i| i.to_string()).collect();
    for _ in 0..200 {
        let preds: Vec<Prediction> = (0..800)
            .map(|i| Prediction {
                predicted: rng.gen_range(0..8),
                target: i % 8,
                probs: Vec::new(),
            })
            .collect();
        let f1 = report_from_predictions(&preds, &labels, StdKind::Population).unwrap().macro_f1;
        assert!((0.05..=0.20).contains(&f1), "macro-F1 {f1}");
    }
}

#[test]
fn untrained_checkpoint_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    balanced_corpus(dir.path(), 100);
    let cfg = ModelConfig {
        d_ctx: 64,
        n_strategies: 8,
        ..Default::default()
    };
    let ckpt = dir.path().join("untrained.ckpt");
    save_model(&ckpt, &Model::<f64>::new(cfg, 2).unwrap(), None, Value::Null).unwrap();
    let s = ok(
        dir.path(),
        &["eval", "--config", "balanced.toml", "--checkpoint", ckpt.to_str().unwrap()],
    );
    let f1 = s["macro_f1"].as_f64().unwrap();
    assert_eq!(s["n_samples"], 800);
    // An untrained network favours a few classes, so it can fall below the
    // uniform-guessing band but not below always predicting one class.
    let single_class = 2.0 / 9.0 / 8.0;
    assert!(f1 >= single_class - 1e-12 && f1 <= 0.20, "macro-F1 {f1}");
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    // Usage: unknown flag, unknown ablation.
    assert_eq!(code(dir.path(), &["train", "--bogus"]).0, 1);
    assert_eq!(code(dir.path(), &["ingest", "--ablate", "no_everything"]).0, 1);
    // Config: no corpus, unknown key, missing referenced file.
    assert_eq!(code(dir.path(), &["ingest"]).0, 1);
    std::fs::write(dir.path().join("bad.toml"), "sede = 1\n").unwrap();
    assert_eq!(code(dir.path(), &["ingest", "--config", "bad.toml"]).0, 1);
    std::fs::write(
        dir.path().join("missing.toml"),
        "[corpus]\nschema = \"esconv\"\npath = \"nowhere.jsonl\"\n",
    )
    .unwrap();
    let (c, err) = code(dir.path(), &["ingest", "--config", "missing.toml"]);
    assert_eq!(c, 1);
    assert!(err.contains("nowhere.jsonl"), "{err}");
    // Data: malformed corpus, missing checkpoint.
    std::fs::write(dir.path().join("broken.jsonl"), "{not json\n").unwrap();
    std::fs::write(
        dir.path().join("broken.toml"),
        "[corpus]\nschema = \"esconv\"\npath = \"broken.jsonl\"\n",
    )
    .unwrap();
    assert_eq!(code(dir.path(), &["ingest", "--config", "broken.toml"]).0, 2);
    balanced_corpus(dir.path(), 2);
    let (c, err) = code(dir.path(), &["eval", "--config", "balanced.toml", "--checkpoint", "gone.ckpt"]);
    assert_eq!(c, 2);
    assert!(err.contains("gone.ckpt"), "{err}");
    // Numeric: a learning rate that overflows the parameters.
    synth_workspace(dir.path(), 30, 20);
    let cfg = dir.path().join("syn/config.toml");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("lr = 0.005", "lr = 1e300");
    std::fs::write(&cfg, text).unwrap();
    let (c, err) = code(dir.path(), &["train", "--config", "syn/config.toml"]);
    assert_eq!(c, 3, "{err}");
}
