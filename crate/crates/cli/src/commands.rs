//! One function per subcommand. Each writes its artifacts under the output
//! directory and returns a JSON summary that echoes the resolved config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use emodynamix::corpus::{class_counts, window_corpus, write_corpus, Schema, WindowSample};
use emodynamix::features::{write_feature_file, FeatureHeader, FeatureProvider, EMOTIONS};
use emodynamix::metrics::EvalReport;
use emodynamix::model::{Ablations, Model, ModelConfig, ABLATION_NAMES};
use emodynamix::synthetic::separable;
use emodynamix::trace::{disagreement_report, emotion_share, trace_dot, trace_sample, traces_jsonl};
use emodynamix::train::{
    evaluate, load_model, log_jsonl, predict_all, report_from_predictions, save_model, train,
    Example, TrainConfig, TrainOutcome,
};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::data::{self, split_index, Prepared, SPLITS};
use crate::error::{CliError, Result};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    std::fs::write(path, contents).map_err(CliError::io(path))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    write(path, serde_json::to_string_pretty(v).expect("json value") + "\n")
}

fn summary(cfg: &RunConfig, command: &str, body: Value) -> Result<Value> {
    let mut v = json!({ "command": command, "config": cfg });
    if let (Value::Object(dst), Value::Object(src)) = (&mut v, body) {
        dst.extend(src);
    }
    write_json(&cfg.out.join(format!("{command}_summary.json")), &v)?;
    Ok(v)
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| serde_json::to_string(x).expect("serializable") + "\n")
        .collect()
}

fn histogram(samples: &[WindowSample], labels: &[String]) -> BTreeMap<String, usize> {
    labels.iter().cloned().zip(class_counts(samples, labels.len())).collect()
}

fn report_row(r: &EvalReport) -> Value {
    json!({
        "macro_f1": r.macro_f1,
        "weighted_f1": r.weighted_f1,
        "bias": r.bias,
        "accuracy": r.accuracy,
        "n_samples": r.n_samples,
    })
}

fn write_report(dir: &Path, stem: &str, r: &EvalReport) -> Result<()> {
    write(&dir.join(format!("{stem}.json")), r.to_json() + "\n")?;
    write(&dir.join(format!("{stem}_confusion.csv")), r.confusion_csv(false))?;
    write(&dir.join(format!("{stem}_confusion_normalized.csv")), r.confusion_csv(true))
}

/// Write a separable synthetic corpus, its planted features and a config
/// that trains on them.
pub fn synth(cfg: &RunConfig, n_dialogues: usize, scramble: bool) -> Result<Value> {
    if n_dialogues == 0 {
        return Err(CliError::Usage("--dialogues must be positive".into()));
    }
    let corpus = separable(n_dialogues, cfg.seed);
    let d_ctx = 32;
    let out = &cfg.out;
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    write_corpus(&out.join("corpus.jsonl"), &corpus.dialogues, &corpus.set)?;
    let provider = corpus.provider(d_ctx, scramble.then_some(cfg.seed ^ 0x5eed));
    let (samples, _) = window_corpus(&corpus.dialogues, cfg.window);
    let bundles = samples
        .iter()
        .map(|s| provider.provide(s))
        .collect::<Result<Vec<_>, _>>()?;
    write_feature_file(&out.join("features.jsonl"), &FeatureHeader::new(d_ctx), &bundles)?;

    let mut run = RunConfig {
        seed: cfg.seed,
        out: PathBuf::from("run"),
        window: cfg.window,
        features: "features.jsonl".into(),
        strategy_labels: Some(corpus.set.labels.clone()),
        class_weights: false,
        ..Default::default()
    };
    run.corpus.schema = Schema::Generic;
    run.corpus.path = Some("corpus.jsonl".into());
    run.model = ModelConfig {
        hidden: 16,
        layers: 2,
        heads: 2,
        d_ctx,
        n_strategies: corpus.set.len(),
        mlp_hidden: 32,
        ..Default::default()
    };
    run.train = TrainConfig {
        lr: 5e-3,
        warmup_steps: 50,
        total_steps: 1000,
        batch_size: 16,
        eval_every: 100,
        seed: cfg.seed,
        ..Default::default()
    };
    write(&out.join("config.toml"), run.to_toml())?;
    summary(
        cfg,
        "synth",
        json!({
            "dialogues": n_dialogues,
            "samples": samples.len(),
            "scrambled": scramble,
            "generated_config": run,
        }),
    )
}

pub fn ingest(cfg: &RunConfig) -> Result<Value> {
    let corpus = data::load(cfg)?;
    let w = data::window(&corpus, cfg.window);
    let mut splits = serde_json::Map::new();
    let mut warnings = Vec::new();
    for (i, name) in SPLITS.iter().enumerate() {
        write(
            &cfg.out.join("samples").join(format!("{name}.jsonl")),
            jsonl(&w.samples[i]),
        )?;
        if w.samples[i].is_empty() {
            let msg = format!("{name} split has no samples");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let ids: Vec<&str> = corpus.splits[i].iter().map(|d| d.id.as_str()).collect();
        splits.insert(
            name.to_string(),
            json!({
                "dialogues": ids.len(),
                "samples": w.samples[i].len(),
                "skipped_agent_turns": w.skipped[i],
                "histogram": histogram(&w.samples[i], &corpus.set.labels),
                "dialogue_ids": ids,
            }),
        );
    }
    let total: usize = w.samples.iter().map(Vec::len).sum();
    let manifest = json!({
        "strategy_set": corpus.set,
        "kept_dialogues": corpus.load.kept,
        "dropped_low_quality": corpus.load.dropped_low_quality,
        "total_samples": total,
        "splits": splits,
        "warnings": warnings,
    });
    write_json(&cfg.out.join("manifest.json"), &manifest)?;
    summary(cfg, "ingest", manifest)
}

struct Fitted {
    outcome: TrainOutcome<f64>,
    test: Option<EvalReport>,
}

fn fit(cfg: &RunConfig, prep: &Prepared, model_cfg: &ModelConfig, weights: Option<&[f64]>) -> Result<Fitted> {
    let [tr, dv, te] = prep.all_examples(model_cfg.graph_options())?;
    let model = Model::<f64>::new(model_cfg.clone(), cfg.seed)?;
    let labels = &prep.set.labels;
    let outcome = train(model, &tr, &dv, labels, weights, &cfg.train)?;
    let test = if te.is_empty() {
        log::warn!("test split is empty; skipping test evaluation");
        None
    } else {
        Some(evaluate(&outcome.best, &te, labels, cfg.train.bias_std)?)
    };
    Ok(Fitted { outcome, test })
}

fn save_run(dir: &Path, cfg: &RunConfig, f: &Fitted) -> Result<()> {
    let o = &f.outcome;
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let extra = json!({ "best_step": o.best_step, "best_score": o.best_score, "seed": cfg.seed });
    save_model(&dir.join("best.ckpt"), &o.best, Some(&cfg.train), extra.clone())?;
    save_model(&dir.join("final.ckpt"), &o.final_model, Some(&cfg.train), extra)?;
    write(&dir.join("train_log.jsonl"), log_jsonl(&o.log))?;
    if let Some(r) = &f.test {
        write_report(dir, "test_report", r)?;
    }
    Ok(())
}

fn fit_body(f: &Fitted) -> Value {
    json!({
        "best_step": f.outcome.best_step,
        "best_dev_score": f.outcome.best_score,
        "final_loss": f.outcome.log.last().map(|r| r.loss),
        "learned_tau": f.outcome.best.tau(),
        "test": f.test.as_ref().map(report_row),
    })
}

pub fn train_cmd(mut cfg: RunConfig) -> Result<Value> {
    let prep = Prepared::new(&mut cfg)?;
    let weights = prep.class_weights(cfg.class_weights)?;
    let f = fit(&cfg, &prep, &cfg.model, weights.as_deref())?;
    save_run(&cfg.out, &cfg, &f)?;
    let mut body = fit_body(&f);
    body["class_weights"] = json!(weights);
    body["samples"] = json!(prep.windowed.samples.iter().map(Vec::len).collect::<Vec<_>>());
    summary(&cfg, "train", body)
}

fn checkpoint_path(cfg: &RunConfig, flag: Option<&Path>) -> Result<PathBuf> {
    let p = flag.map_or_else(|| cfg.out.join("best.ckpt"), Path::to_path_buf);
    if !p.is_file() {
        return Err(CliError::Data(format!("checkpoint not found: {}", p.display())));
    }
    Ok(p)
}

/// Load a checkpoint and the examples of one split, shaped for it.
fn load_for_eval(
    cfg: &mut RunConfig,
    checkpoint: Option<&Path>,
    split: &str,
) -> Result<(Model<f64>, Prepared, Vec<Example>, PathBuf)> {
    let split = split_index(split)?;
    let path = checkpoint_path(cfg, checkpoint)?;
    let loaded = load_model::<f64>(&path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let model = loaded.model;
    cfg.model = model.cfg.clone();
    let prep = Prepared::new(cfg)?;
    if cfg.model != model.cfg {
        return Err(CliError::Config(format!(
            "checkpoint {} expects d_ctx {} and {} strategies; data provides {} and {}",
            path.display(),
            model.cfg.d_ctx,
            model.cfg.n_strategies,
            cfg.model.d_ctx,
            cfg.model.n_strategies
        )));
    }
    let ex = prep.examples(split, model.cfg.graph_options())?;
    if ex.is_empty() {
        return Err(CliError::Data(format!("{} split has no samples", SPLITS[split])));
    }
    Ok((model, prep, ex, path))
}

pub fn eval(mut cfg: RunConfig, checkpoint: Option<&Path>, split: &str) -> Result<Value> {
    let (model, prep, ex, path) = load_for_eval(&mut cfg, checkpoint, split)?;
    let preds = predict_all(&model, &ex)?;
    let report = report_from_predictions(&preds, &prep.set.labels, cfg.train.bias_std)?;
    write_report(&cfg.out, &format!("eval_{split}"), &report)?;
    let keyed: Vec<Value> = ex
        .iter()
        .zip(&preds)
        .map(|(e, p)| json!({ "key": e.key(), "predicted": p.predicted, "target": p.target, "probs": p.probs }))
        .collect();
    write(&cfg.out.join(format!("predictions_{split}.jsonl")), jsonl(&keyed))?;
    let mut body = report_row(&report);
    body["checkpoint"] = json!(path);
    body["split"] = json!(split);
    body["preferences"] = json!(report.preferences);
    summary(&cfg, "eval", body)
}

fn dot_file_name(key: &str) -> String {
    key.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect::<String>()
        + ".dot"
}

pub fn trace(mut cfg: RunConfig, checkpoint: Option<&Path>, split: &str, dot: bool) -> Result<Value> {
    let (model, prep, ex, path) = load_for_eval(&mut cfg, checkpoint, split)?;
    let traces = ex
        .iter()
        .map(|e| trace_sample(&model, e))
        .collect::<Result<Vec<_>, _>>()?;
    write(&cfg.out.join(format!("traces_{split}.jsonl")), traces_jsonl(&traces))?;
    let report = disagreement_report(&traces, 10);
    write(&cfg.out.join(format!("disagreement_{split}.csv")), report.to_csv(&prep.set))?;
    if dot {
        let dir = cfg.out.join("dot");
        for (t, e) in traces.iter().zip(&ex) {
            write(&dir.join(dot_file_name(&t.sample_key)), trace_dot(t, e, &prep.set))?;
        }
    }
    let shares: BTreeMap<&str, Value> = EMOTIONS
        .iter()
        .map(|&e| {
            let all = emotion_share(&traces, e, false);
            let mism = emotion_share(&traces, e, true);
            (e, json!({ "all": all, "mismatches": mism }))
        })
        .collect();
    let body = json!({
        "checkpoint": path,
        "split": split,
        "samples": traces.len(),
        "mismatches": report.total_mismatches,
        "mismatch_patterns": report.n_patterns,
        "dominant_emotion_share": shares,
        "dot_files": if dot { traces.len() } else { 0 },
    });
    summary(&cfg, "trace", body)
}

fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.join(","));
    }
    s
}

fn metric_cells(r: Option<&EvalReport>) -> Vec<String> {
    match r {
        Some(r) => vec![
            r.macro_f1.to_string(),
            r.weighted_f1.to_string(),
            r.bias.to_string(),
            r.accuracy.to_string(),
        ],
        None => vec![String::new(); 4],
    }
}

/// The full model and each single ablation, on identical splits and seeds.
pub fn ablate(mut cfg: RunConfig) -> Result<Value> {
    cfg.model.ablations = Ablations::default();
    let prep = Prepared::new(&mut cfg)?;
    let weights = prep.class_weights(cfg.class_weights)?;
    let mut rows = Vec::new();
    let mut csv = Vec::new();
    for variant in std::iter::once("full").chain(ABLATION_NAMES) {
        let mut mc = cfg.model.clone();
        mc.ablations = Ablations::single(variant).unwrap_or_default();
        log::info!("training variant {variant}");
        let f = fit(&cfg, &prep, &mc, weights.as_deref())?;
        save_run(&cfg.out.join("ablate").join(variant), &cfg, &f)?;
        let mut row = fit_body(&f);
        row["variant"] = json!(variant);
        rows.push(row);
        let mut cells = vec![variant.to_string(), f.outcome.best_step.to_string()];
        cells.extend(metric_cells(f.test.as_ref()));
        csv.push(cells);
    }
    let header = ["variant", "best_step", "macro_f1", "weighted_f1", "bias", "accuracy"];
    write(&cfg.out.join("ablate.csv"), csv_table(&header, &csv))?;
    summary(&cfg, "ablate", json!({ "variants": rows }))
}

pub fn tau_sweep(mut cfg: RunConfig) -> Result<Value> {
    if cfg.taus.is_empty() {
        return Err(CliError::Usage("no taus to sweep".into()));
    }
    let prep = Prepared::new(&mut cfg)?;
    let weights = prep.class_weights(cfg.class_weights)?;
    let mut rows = Vec::new();
    let mut csv = Vec::new();
    for &tau in &cfg.taus {
        let mut mc = cfg.model.clone();
        mc.tau_init = tau;
        log::info!("training with tau_init {tau}");
        let f = fit(&cfg, &prep, &mc, weights.as_deref())?;
        save_run(&cfg.out.join("tau_sweep").join(format!("tau_{tau}")), &cfg, &f)?;
        let mut row = fit_body(&f);
        row["tau_init"] = json!(tau);
        rows.push(row);
        let mut cells = vec![tau.to_string(), f.outcome.best.tau().to_string(), f.outcome.best_step.to_string()];
        cells.extend(metric_cells(f.test.as_ref()));
        csv.push(cells);
    }
    let header = ["tau_init", "learned_tau", "best_step", "macro_f1", "weighted_f1", "bias", "accuracy"];
    write(&cfg.out.join("tau_sweep.csv"), csv_table(&header, &csv))?;
    summary(&cfg, "tau_sweep", json!({ "rows": rows }))
}
