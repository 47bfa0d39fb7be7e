//! Mini-batch training with AdamW, warmup-then-linear-decay learning rate,
//! periodic dev evaluation and best-checkpoint selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{StrategySet, WindowSample};
use crate::features::{FeatureError, FeatureProvider};
use crate::graph::{build_graph, GraphError, GraphOptions, HeteroGraph};
use crate::metrics::{ConfusionMatrix, EvalReport, MetricsError, StdKind};
use crate::model::{Model, ModelConfig, ModelError};
use crate::tensor::{
    read_checkpoint, write_checkpoint, Gradients, ParamStore, Real, Tensor, TensorError,
};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("sample {key}: {source}")]
    Graph {
        key: String,
        #[source]
        source: GraphError,
    },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGrad(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
}

impl TrainError {
    /// True when the failure comes from a non-finite value.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteGrad(_)
                | TrainError::Tensor(TensorError::NonFinite { .. })
                | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
                | TrainError::Metrics(MetricsError::NonFinite(_))
        )
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMetric {
    #[default]
    MacroF1,
    WeightedF1,
}

impl SelectMetric {
    pub fn of(self, r: &EvalReport) -> f64 {
        match self {
            SelectMetric::MacroF1 => r.macro_f1,
            SelectMetric::WeightedF1 => r.weighted_f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub select_metric: SelectMetric,
    pub eval_every: usize,
    /// Abort on the first non-finite forward value or gradient.
    pub checked: bool,
    /// Worker threads for per-sample passes; 0 uses the global pool.
    pub threads: usize,
    pub bias_std: StdKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 500,
            total_steps: 3000,
            batch_size: 16,
            weight_decay: 1e-3,
            seed: 42,
            select_metric: SelectMetric::MacroF1,
            eval_every: 100,
            checked: true,
            threads: 0,
            bias_std: StdKind::Population,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if self.total_steps == 0 {
            return fail("total_steps must be positive");
        }
        if self.warmup_steps > self.total_steps {
            return fail("warmup_steps must not exceed total_steps");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return fail("batch_size and eval_every must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// Learning rate for the 1-based update `step`: linear warmup to `lr`, then
/// linear decay to zero at `total_steps`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let s = step as f64;
    let up = if cfg.warmup_steps == 0 {
        1.0
    } else {
        s / cfg.warmup_steps as f64
    };
    let down = if cfg.total_steps == cfg.warmup_steps {
        if step < cfg.total_steps {
            1.0
        } else {
            0.0
        }
    } else {
        ((cfg.total_steps as f64 - s) / (cfg.total_steps - cfg.warmup_steps) as f64).max(0.0)
    };
    cfg.lr * up.min(down)
}

/// AdamW moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: usize,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update at 1-based `step`. Parameters without a gradient in
/// `grads` are left untouched, moments included.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(TrainError::Config("optimizer state does not match parameters".into()));
    }
    if cfg.checked {
        for (id, g) in grads.iter() {
            if !g.all_finite() {
                return Err(TrainError::NonFiniteGrad(params.get(*id).name.clone()));
            }
        }
    }
    let lr = lr_at(cfg, step);
    let b1 = BETA1;
    let b2 = BETA2;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let t = |x: f64| T::from_f64_lossy(x);
    let (b1t, b2t, eps, c1t, c2t) = (t(b1), t(b2), t(ADAM_EPS), t(c1), t(c2));
    let (lrt, decay) = (t(lr), t(lr * cfg.weight_decay));
    for (id, g) in grads.iter() {
        let k = id.0;
        let p = params.get_mut(*id);
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1t * *mi + (T::one() - b1t) * gi;
            *vi = b2t * *vi + (T::one() - b2t) * gi * gi;
            let mhat = *mi / c1t;
            let vhat = *vi / c2t;
            *w = *w - decay * *w - lrt * mhat / (vhat.sqrt() + eps);
        }
    }
    state.step = step;
    Ok(())
}

/// A window sample turned into model input.
#[derive(Clone, Debug)]
pub struct Example {
    pub dialogue_id: String,
    pub target_position: usize,
    pub graph: HeteroGraph,
    pub context: Vec<f64>,
    pub target: usize,
}

impl Example {
    pub fn key(&self) -> String {
        format!("{}#{}", self.dialogue_id, self.target_position)
    }
}

pub fn prepare_examples(
    samples: &[WindowSample],
    provider: &dyn FeatureProvider,
    set: &StrategySet,
    opts: GraphOptions,
) -> Result<Vec<Example>> {
    samples
        .par_iter()
        .map(|s| {
            let bundle = provider.provide(s)?;
            let graph = build_graph(s, &bundle, set, opts).map_err(|source| TrainError::Graph {
                key: format!("{}#{}", s.dialogue_id, s.target_position),
                source,
            })?;
            Ok(Example {
                dialogue_id: s.dialogue_id.clone(),
                target_position: s.target_position,
                graph,
                context: bundle.context,
                target: s.target_strategy,
            })
        })
        .collect()
}

fn with_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub predicted: usize,
    pub target: usize,
    pub probs: Vec<f64>,
}

pub fn predict_all<T: Real>(model: &Model<T>, examples: &[Example]) -> Result<Vec<Prediction>> {
    examples
        .par_iter()
        .map(|e| {
            let (probs, _) = model.predict(&e.graph, &e.context)?;
            Ok(Prediction {
                predicted: crate::graph::argmax(&probs),
                target: e.target,
                probs,
            })
        })
        .collect()
}

pub fn report_from_predictions(
    preds: &[Prediction],
    labels: &[String],
    kind: StdKind,
) -> Result<EvalReport> {
    let cm = ConfusionMatrix::from_pairs(labels.len(), preds.iter().map(|p| (p.predicted, p.target)))?;
    Ok(EvalReport::from_confusion(cm, labels.to_vec(), kind)?)
}

pub fn evaluate<T: Real>(
    model: &Model<T>,
    examples: &[Example],
    labels: &[String],
    kind: StdKind,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(TrainError::EmptySet("evaluation"));
    }
    report_from_predictions(&predict_all(model, examples)?, labels, kind)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    /// Mean batch loss since the previous record.
    pub loss: f64,
    pub lr: f64,
    pub dev_macro_f1: f64,
    pub dev_weighted_f1: f64,
    pub dev_bias: f64,
}

pub fn log_jsonl(log: &[LogRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
        .collect()
}

pub struct TrainOutcome<T> {
    pub best: Model<T>,
    pub best_step: usize,
    pub best_score: f64,
    pub final_model: Model<T>,
    pub log: Vec<LogRecord>,
    /// Batch loss at every update.
    pub step_losses: Vec<f64>,
}

/// Mean loss and averaged gradients over one batch. Per-sample passes may
/// run in parallel; the reduction is sequential in batch order.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    examples: &[Example],
    batch: &[usize],
    class_weights: Option<&[f64]>,
    checked: bool,
) -> Result<(f64, Gradients<T>)> {
    let per: Vec<(f64, Gradients<T>)> = batch
        .par_iter()
        .map(|&i| {
            let e = &examples[i];
            let w = class_weights.map_or(1.0, |cw| cw[e.target]);
            Ok(model.loss_and_grads(&e.graph, &e.context, e.target, w, checked)?)
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total = Gradients::new();
    let mut loss = 0.0;
    for (l, g) in &per {
        loss += l;
        total.merge_scaled(g, T::from_f64_lossy(scale));
    }
    Ok((loss * scale, total))
}

/// Seeded epoch-wise shuffling that yields batches of up to `batch_size`.
struct Batcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl Batcher {
    fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
            batch_size,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        b
    }
}

/// Train `model` for `cfg.total_steps` updates, evaluating on `dev` every
/// `cfg.eval_every` steps and at the end. The best model by
/// `cfg.select_metric` is returned alongside the final one; ties keep the
/// earlier step.
pub fn train<T: Real>(
    model: Model<T>,
    train_set: &[Example],
    dev: &[Example],
    labels: &[String],
    class_weights: Option<&[f64]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySet("train"));
    }
    if dev.is_empty() {
        return Err(TrainError::EmptySet("dev"));
    }
    if labels.len() != model.cfg.n_strategies {
        return Err(TrainError::Config(format!(
            "{} labels for {} strategies",
            labels.len(),
            model.cfg.n_strategies
        )));
    }
    if let Some(w) = class_weights {
        if w.len() != labels.len() {
            return Err(TrainError::Config("class weight count mismatch".into()));
        }
    }
    with_pool(cfg.threads, move || {
        train_inner(model, train_set, dev, labels, class_weights, cfg)
    })
}

fn train_inner<T: Real>(
    mut model: Model<T>,
    train_set: &[Example],
    dev: &[Example],
    labels: &[String],
    class_weights: Option<&[f64]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let mut state = OptimizerState::new(&model.params);
    let mut batcher = Batcher::new(train_set.len(), cfg.batch_size, cfg.seed);
    let mut log = Vec::new();
    let mut step_losses = Vec::with_capacity(cfg.total_steps);
    let mut best: Option<(Model<T>, usize, f64)> = None;
    let mut since = Vec::new();
    for step in 1..=cfg.total_steps {
        let batch = batcher.next_batch();
        let (loss, grads) = batch_gradients(&model, train_set, &batch, class_weights, cfg.checked)?;
        adamw_step(&mut model.params, &grads, &mut state, cfg, step)?;
        step_losses.push(loss);
        since.push(loss);
        if step % cfg.eval_every == 0 || step == cfg.total_steps {
            let report = evaluate(&model, dev, labels, cfg.bias_std)?;
            let rec = LogRecord {
                step,
                loss: since.iter().sum::<f64>() / since.len() as f64,
                lr: lr_at(cfg, step),
                dev_macro_f1: report.macro_f1,
                dev_weighted_f1: report.weighted_f1,
                dev_bias: report.bias,
            };
            log::info!(
                "step {step} loss {:.4} lr {:.2e} dev macro-F1 {:.4}",
                rec.loss,
                rec.lr,
                rec.dev_macro_f1
            );
            since.clear();
            log.push(rec);
            let score = cfg.select_metric.of(&report);
            if best.as_ref().map_or(true, |(_, _, s)| score > *s) {
                best = Some((model.clone(), step, score));
            }
        }
    }
    let (best, best_step, best_score) = best.expect("at least one evaluation");
    Ok(TrainOutcome {
        best,
        best_step,
        best_score,
        final_model: model,
        log,
        step_losses,
    })
}

/// Write a model with its configuration (and anything in `extra`) echoed
/// into the checkpoint metadata.
pub fn save_model<T: Real>(
    path: &Path,
    model: &Model<T>,
    train_cfg: Option<&TrainConfig>,
    extra: Value,
) -> Result<()> {
    let meta = json!({
        "model": model.cfg,
        "train": train_cfg,
        "extra": extra,
    });
    write_checkpoint(path, &model.params, &meta)?;
    Ok(())
}

pub struct LoadedModel<T> {
    pub model: Model<T>,
    pub train: Option<TrainConfig>,
    pub metadata: Value,
}

pub fn load_model<T: Real>(path: &Path) -> Result<LoadedModel<T>> {
    let ck = read_checkpoint::<T>(path)?;
    let cfg: ModelConfig = serde_json::from_value(ck.metadata["model"].clone())
        .map_err(|e| TrainError::Metadata(e.to_string()))?;
    let train = match &ck.metadata["train"] {
        Value::Null => None,
        v => Some(serde_json::from_value(v.clone()).map_err(|e| TrainError::Metadata(e.to_string()))?),
    };
    Ok(LoadedModel {
        model: Model::from_params(cfg, ck.params)?,
        train,
        metadata: ck.metadata,
    })
}
