use emodynamix::corpus::{load_corpus, window_corpus, write_corpus, Schema, StrategySet};
use emodynamix::features::{write_feature_file, FallbackProvider, FeatureHeader, FeatureProvider, FileProvider};
use emodynamix::metrics::StdKind;
use emodynamix::model::{Model, ModelConfig};
use emodynamix::synthetic::{random_dialogues, separable};
use emodynamix::trace::{trace_dot, trace_sample};
use emodynamix::train::{
    batch_gradients, evaluate, load_model, prepare_examples, save_model, train, TrainConfig,
};

fn small(n_strategies: usize, d_ctx: usize) -> ModelConfig {
    ModelConfig {
        hidden: 8,
        layers: 2,
        heads: 2,
        d_ctx,
        n_strategies,
        mlp_hidden: 16,
        ..Default::default()
    }
}

#[test]
fn corpus_file_to_checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = separable(40, 12);
    let corpus_path = dir.path().join("corpus.jsonl");
    write_corpus(&corpus_path, &corpus.dialogues, &corpus.set).unwrap();
    let (dialogues, stats) = load_corpus(&corpus_path, Schema::Generic, &corpus.set).unwrap();
    assert_eq!(stats.kept, 40);
    assert_eq!(dialogues, corpus.dialogues);

    let (samples, _) = window_corpus(&dialogues, 5);
    let planted = corpus.provider(12, None);
    let bundles: Vec<_> = samples.iter().map(|s| planted.provide(s).unwrap()).collect();
    let feature_path = dir.path().join("features.jsonl");
    write_feature_file(&feature_path, &FeatureHeader::new(12), &bundles).unwrap();
    let file = FileProvider::load(&feature_path).unwrap();
    assert_eq!(file.d_ctx(), 12);
    for (s, b) in samples.iter().zip(&bundles) {
        assert_eq!(&file.provide(s).unwrap(), b);
    }

    let examples = prepare_examples(&samples, &file, &corpus.set, Default::default()).unwrap();
    let tc = TrainConfig {
        total_steps: 40,
        warmup_steps: 5,
        eval_every: 10,
        ..Default::default()
    };
    let labels = &corpus.set.labels;
    let out = train(Model::<f64>::new(small(5, 12), 4).unwrap(), &examples, &examples, labels, None, &tc)
        .unwrap();
    assert_eq!(out.log.len(), 4);
    assert!(out.log.iter().any(|r| r.step == out.best_step));

    let ckpt = dir.path().join("best.ckpt");
    save_model(&ckpt, &out.best, Some(&tc), serde_json::json!({"best_step": out.best_step})).unwrap();
    let loaded = load_model::<f64>(&ckpt).unwrap();
    assert_eq!(loaded.train.as_ref(), Some(&tc));
    assert_eq!(loaded.model.cfg, out.best.cfg);
    let a = evaluate(&out.best, &examples, labels, StdKind::Population).unwrap();
    let b = evaluate(&loaded.model, &examples, labels, StdKind::Population).unwrap();
    assert_eq!(a, b);
    let logged = out.log.iter().find(|r| r.step == out.best_step).unwrap();
    assert_eq!(logged.dev_macro_f1, b.macro_f1);
}

#[test]
fn f32_checkpoint_is_rejected_as_f64() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::<f32>::new(small(8, 4), 1).unwrap();
    let p = dir.path().join("m.ckpt");
    save_model(&p, &m, None, serde_json::Value::Null).unwrap();
    assert!(load_model::<f64>(&p).is_err());
    let back = load_model::<f32>(&p).unwrap();
    assert_eq!(back.model.params.value(back.model.layout.w1), m.params.value(m.layout.w1));
}

#[test]
fn full_batch_loss_moving_average_does_not_increase() {
    let set = StrategySet::esconv();
    let dialogues = random_dialogues(16, 2, set.len(), 77);
    let (samples, _) = window_corpus(&dialogues, 5);
    let provider = FallbackProvider::new(64);
    let examples = prepare_examples(&samples, &provider, &set, Default::default()).unwrap();
    assert_eq!(examples.len(), 32);
    let tc = TrainConfig {
        lr: 3e-3,
        warmup_steps: 20,
        total_steps: 400,
        batch_size: 32,
        weight_decay: 0.0,
        eval_every: 400,
        ..Default::default()
    };
    let cfg = ModelConfig {
        hidden: 16,
        mlp_hidden: 64,
        ..small(set.len(), 64)
    };
    let out = train(Model::<f64>::new(cfg, 1).unwrap(), &examples, &examples, &set.labels, None, &tc).unwrap();
    let ma: Vec<f64> = out
        .step_losses
        .windows(20)
        .map(|w| w.iter().sum::<f64>() / 20.0)
        .collect();
    for (i, pair) in ma.windows(2).enumerate() {
        assert!(pair[1] <= pair[0] + 1e-12, "moving average rose at step {}: {:?}", i + 21, pair);
    }
    assert!(out.step_losses.last().unwrap() < &0.05);
}

#[test]
fn class_weights_scale_per_sample_loss() {
    let set = StrategySet::esconv();
    let dialogues = random_dialogues(4, 2, set.len(), 3);
    let (samples, _) = window_corpus(&dialogues, 5);
    let examples = prepare_examples(&samples, &FallbackProvider::new(8), &set, Default::default()).unwrap();
    let m = Model::<f64>::new(small(set.len(), 8), 2).unwrap();
    let weights: Vec<f64> = (0..set.len()).map(|c| 0.5 + c as f64).collect();
    for i in 0..examples.len() {
        let (plain, _) = batch_gradients(&m, &examples, &[i], None, true).unwrap();
        let (weighted, _) = batch_gradients(&m, &examples, &[i], Some(&weights), true).unwrap();
        let w = weights[examples[i].target];
        assert!((weighted - w * plain).abs() < 1e-12);
    }
    let idx: Vec<usize> = (0..examples.len()).collect();
    let (batch, _) = batch_gradients(&m, &examples, &idx, Some(&weights), true).unwrap();
    let mean = idx
        .iter()
        .map(|&i| batch_gradients(&m, &examples, &[i], Some(&weights), true).unwrap().0)
        .sum::<f64>()
        / idx.len() as f64;
    assert!((batch - mean).abs() < 1e-12);
}

#[test]
fn parallel_and_serial_training_agree_bitwise() {
    let corpus = separable(30, 8);
    let (samples, _) = window_corpus(&corpus.dialogues, 5);
    let ex = prepare_examples(&samples, &corpus.provider(8, None), &corpus.set, Default::default()).unwrap();
    let run = |threads| {
        let tc = TrainConfig {
            total_steps: 20,
            warmup_steps: 2,
            eval_every: 10,
            threads,
            ..Default::default()
        };
        train(Model::<f64>::new(small(5, 8), 9).unwrap(), &ex, &ex, &corpus.set.labels, None, &tc).unwrap()
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.log, b.log);
    for ((_, pa), (_, pb)) in a.final_model.params.iter().zip(b.final_model.params.iter()) {
        assert_eq!(pa.value, pb.value);
    }
}

#[test]
fn dot_export_lists_every_node_and_edge() {
    let corpus = separable(3, 1);
    let (samples, _) = window_corpus(&corpus.dialogues, 5);
    let ex = prepare_examples(&samples, &corpus.provider(8, None), &corpus.set, Default::default()).unwrap();
    let m = Model::<f64>::new(small(5, 8), 1).unwrap();
    let longest = ex.iter().max_by_key(|e| e.graph.n_nodes()).unwrap();
    let t = trace_sample(&m, longest).unwrap();
    let dot = trace_dot(&t, longest, &corpus.set);
    assert!(dot.starts_with("digraph"));
    assert!(dot.trim_end().ends_with('}'));
    assert_eq!(dot.matches("shape=").count(), longest.graph.n_nodes());
    assert_eq!(dot.matches(" -> ").count(), longest.graph.edges().len());
    assert!(dot.contains("inter_reference"));
}
