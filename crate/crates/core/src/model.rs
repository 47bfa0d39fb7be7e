//! The strategy predictor: node embeddings, relational graph attention with
//! residual connections, and the context-plus-graph MLP head.
//!
//! Node initialisation:
//! * emotion nodes mix the rows of a trainable emotion codebook with a
//!   temperature-scaled softmax of the ERC logits (`tau = exp(log_tau)`);
//! * strategy nodes select a row of the strategy codebook;
//! * the dummy node starts from a shared trainable vector.
//!
//! Each attention layer scores every in-edge `(j -> i, r)` per head `k` as
//! `LeakyReLU(wq[r,k] . g_i[k] + wk[r,k] . g_j[k])`, where `g[k]` is the
//! `k`-th `hidden / heads` slice of a node embedding, normalizes with one
//! softmax over all in-edges of `i` across relations, aggregates
//! `wv[r,k] g_j`, applies LeakyReLU, concatenates heads and adds the input
//! back. Nodes without in-edges pass through unchanged.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{argmax, Edge, EdgeKind, GraphOptions, HeteroGraph, NodeKind, Payload, NUM_EDGE_KINDS};
use crate::tensor::{Gradients, ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Head sees only the context embedding (graph slot zero-filled).
    pub no_graph: bool,
    /// Emotion nodes use the one-hot argmax of the logits.
    pub no_mixed_emotion: bool,
    /// Discourse edges replaced by a sequential Continuation chain.
    pub no_discourse: bool,
    /// Mean-max pooling over history nodes instead of the dummy node.
    pub no_dummy: bool,
}

pub const ABLATION_NAMES: [&str; 4] = ["no_graph", "no_mixed_emotion", "no_discourse", "no_dummy"];

impl Ablations {
    pub fn single(name: &str) -> Option<Self> {
        let mut a = Self::default();
        a.enable(name).then_some(a)
    }

    /// Turn on the named ablation; false if the name is unknown.
    pub fn enable(&mut self, name: &str) -> bool {
        match name.trim().replace('-', "_").as_str() {
            "no_graph" => self.no_graph = true,
            "no_mixed_emotion" => self.no_mixed_emotion = true,
            "no_discourse" => self.no_discourse = true,
            "no_dummy" => self.no_dummy = true,
            _ => return false,
        }
        true
    }

    pub fn names(&self) -> Vec<&'static str> {
        let flags = [self.no_graph, self.no_mixed_emotion, self.no_discourse, self.no_dummy];
        ABLATION_NAMES
            .iter()
            .zip(flags)
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ctx: usize,
    pub n_strategies: usize,
    pub n_emotions: usize,
    pub tau_init: f64,
    pub mlp_hidden: usize,
    pub negative_slope: f64,
    pub reverse_discourse: bool,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            layers: 3,
            heads: 4,
            d_ctx: 256,
            n_strategies: 8,
            n_emotions: 7,
            tau_init: 0.5,
            mlp_hidden: 256,
            negative_slope: 0.2,
            reverse_discourse: false,
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail("hidden must be a positive multiple of heads");
        }
        if self.layers == 0 {
            return fail("layers must be >= 1");
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return fail("tau_init must be positive");
        }
        if self.d_ctx == 0 || self.mlp_hidden == 0 || self.n_strategies < 2 || self.n_emotions == 0
        {
            return fail("dimensions must be positive and at least 2 strategies");
        }
        if self.ablations.no_graph && self.ablations.no_dummy {
            return fail("no_graph and no_dummy are mutually exclusive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Width of the vector fed to the MLP head.
    pub fn head_input_dim(&self) -> usize {
        let graph = if self.ablations.no_dummy {
            2 * self.hidden
        } else {
            self.hidden
        };
        self.d_ctx + graph
    }

    pub fn graph_options(&self) -> GraphOptions {
        GraphOptions {
            sequential_discourse: self.ablations.no_discourse,
            reverse_discourse: self.reverse_discourse,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// Where each parameter group lives inside the [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub emotion_codebook: ParamId,
    pub strategy_codebook: ParamId,
    pub dummy: ParamId,
    pub log_tau: ParamId,
    /// `[layer][relation][head]`.
    pub rgat: Vec<Vec<Vec<HeadParams>>>,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

enum Init {
    Glorot,
    Zero,
    Const(f64),
}

fn build_layout(
    cfg: &ModelConfig,
    mut add: impl FnMut(String, Vec<usize>, Init) -> Result<ParamId>,
) -> Result<ParamLayout> {
    let h = cfg.hidden;
    let hh = cfg.head_dim();
    let emotion_codebook = add("emotion_codebook".into(), vec![cfg.n_emotions, h], Init::Glorot)?;
    let strategy_codebook =
        add("strategy_codebook".into(), vec![cfg.n_strategies, h], Init::Glorot)?;
    let dummy = add("dummy".into(), vec![h], Init::Zero)?;
    let log_tau = add("log_tau".into(), vec![1], Init::Const(cfg.tau_init.ln()))?;
    let mut rgat = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut rels = Vec::with_capacity(NUM_EDGE_KINDS);
        for r in 0..NUM_EDGE_KINDS {
            let mut heads = Vec::with_capacity(cfg.heads);
            for k in 0..cfg.heads {
                let p = format!("rgat.{l}.{r}.{k}");
                heads.push(HeadParams {
                    wq: add(format!("{p}.wq"), vec![1, hh], Init::Glorot)?,
                    wk: add(format!("{p}.wk"), vec![1, hh], Init::Glorot)?,
                    wv: add(format!("{p}.wv"), vec![hh, h], Init::Glorot)?,
                });
            }
            rels.push(heads);
        }
        rgat.push(rels);
    }
    let d_in = cfg.head_input_dim();
    let w1 = add("mlp.w1".into(), vec![cfg.mlp_hidden, d_in], Init::Glorot)?;
    let b1 = add("mlp.b1".into(), vec![cfg.mlp_hidden], Init::Zero)?;
    let w2 = add("mlp.w2".into(), vec![cfg.n_strategies, cfg.mlp_hidden], Init::Glorot)?;
    let b2 = add("mlp.b2".into(), vec![cfg.n_strategies], Init::Zero)?;
    Ok(ParamLayout {
        emotion_codebook,
        strategy_codebook,
        dummy,
        log_tau,
        rgat,
        w1,
        b1,
        w2,
        b2,
    })
}

/// Attention weights of one edge at one layer, one entry per head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeAttention {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    /// Per layer, every edge that received attention.
    pub layers: Vec<Vec<EdgeAttention>>,
}

impl AttentionTrace {
    pub fn into_node(&self, layer: usize, node: usize) -> impl Iterator<Item = &EdgeAttention> {
        self.layers[layer].iter().filter(move |e| e.dst == node)
    }
}

pub struct Forward {
    pub logits: Var,
    pub trace: AttentionTrace,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub layout: ParamLayout,
}

fn one_hot<T: Real>(n: usize, i: usize) -> Tensor<T> {
    let mut v = vec![T::zero(); n];
    v[i] = T::one();
    Tensor::vector(v)
}

fn to_real<T: Real>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::from_f64_lossy(x)).collect()
}

impl<T: Real> Model<T> {
    /// Fresh parameters: Glorot-uniform matrices, zero dummy and biases,
    /// `log_tau = ln(tau_init)`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = build_layout(&cfg, |name, shape, init| {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Zero => vec![T::zero(); n],
                Init::Const(c) => vec![T::from_f64_lossy(c); n],
                Init::Glorot => {
                    let (fan_out, fan_in) = (shape[0], shape[shape.len() - 1]);
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-a, a);
                    (0..n).map(|_| T::from_f64_lossy(dist.sample(&mut rng))).collect()
                }
            };
            Ok(params.add(name, Tensor::from_vec(shape, data)?))
        })?;
        Ok(Self {
            cfg,
            params,
            layout,
        })
    }

    /// Wrap loaded parameters, checking every name and shape.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut expected = 0usize;
        let layout = build_layout(&cfg, |name, shape, _| {
            expected += 1;
            let id = params
                .find(&name)
                .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))?;
            if params.value(id).shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter {name}: shape {:?}, expected {shape:?}",
                    params.value(id).shape()
                )));
            }
            Ok(id)
        })?;
        if expected != params.len() {
            return Err(ModelError::Config(format!(
                "{} parameters present, {expected} expected",
                params.len()
            )));
        }
        Ok(Self {
            cfg,
            params,
            layout,
        })
    }

    pub fn tau(&self) -> f64 {
        self.params.value(self.layout.log_tau).data()[0].to_f64_lossy().exp()
    }

    fn slope(&self) -> T {
        T::from_f64_lossy(self.cfg.negative_slope)
    }

    /// `1 / tau` as a tape node.
    pub fn inverse_tau(&self, tape: &mut Tape<T>) -> Result<Var> {
        let lt = tape.param(&self.params, self.layout.log_tau)?;
        let neg = tape.scale(lt, -T::one())?;
        Ok(tape.exp(neg)?)
    }

    /// Mixed-emotion embedding `softmax(z / tau) . E`, or the argmax row of
    /// `E` under the `no_mixed_emotion` ablation.
    pub fn emotion_embed(&self, tape: &mut Tape<T>, z: &[f64], inv_tau: Var) -> Result<Var> {
        if z.len() != self.cfg.n_emotions {
            return Err(ModelError::Input(format!(
                "{} emotion logits, expected {}",
                z.len(),
                self.cfg.n_emotions
            )));
        }
        let codebook = tape.param(&self.params, self.layout.emotion_codebook)?;
        let weights = if self.cfg.ablations.no_mixed_emotion {
            tape.input(one_hot(z.len(), argmax(z)))?
        } else {
            let zv = tape.input(Tensor::vector(to_real(z)))?;
            let scaled = tape.scale_by(zv, inv_tau)?;
            tape.softmax(scaled, 0)?
        };
        Ok(tape.embedding_select(weights, codebook)?)
    }

    /// Row of the strategy codebook picked by a one-hot vector.
    pub fn strategy_embed(&self, tape: &mut Tape<T>, one_hot_s: &[f64]) -> Result<Var> {
        let ones = one_hot_s.iter().filter(|&&v| v == 1.0).count();
        let zeros = one_hot_s.iter().filter(|&&v| v == 0.0).count();
        if one_hot_s.len() != self.cfg.n_strategies || ones != 1 || ones + zeros != one_hot_s.len()
        {
            return Err(ModelError::Input(format!(
                "strategy vector {one_hot_s:?} is not one-hot over {} classes",
                self.cfg.n_strategies
            )));
        }
        let codebook = tape.param(&self.params, self.layout.strategy_codebook)?;
        let s = tape.input(Tensor::vector(to_real(one_hot_s)))?;
        Ok(tape.embedding_select(s, codebook)?)
    }

    /// Initial embeddings for every node of `g`.
    pub fn init_nodes(&self, tape: &mut Tape<T>, g: &HeteroGraph) -> Result<Vec<Var>> {
        let inv_tau = self.inverse_tau(tape)?;
        let mut out = Vec::with_capacity(g.n_nodes());
        for i in 0..g.n_nodes() {
            let v = match (g.kind(i), g.payload(i)) {
                (NodeKind::Emotion, Payload::Emotion(z)) => self.emotion_embed(tape, z, inv_tau)?,
                (NodeKind::Strategy, Payload::Strategy(s)) => {
                    if *s >= self.cfg.n_strategies {
                        return Err(ModelError::Input(format!("strategy {s} out of range")));
                    }
                    let mut oh = vec![0.0; self.cfg.n_strategies];
                    oh[*s] = 1.0;
                    self.strategy_embed(tape, &oh)?
                }
                (NodeKind::Dummy, _) => tape.param(&self.params, self.layout.dummy)?,
                _ => return Err(ModelError::Input(format!("node {i}: payload/kind mismatch"))),
            };
            out.push(v);
        }
        Ok(out)
    }

    /// One attention layer with residual; returns new embeddings and the
    /// per-edge, per-head attention weights.
    pub fn rgat_forward(
        &self,
        tape: &mut Tape<T>,
        g: &HeteroGraph,
        nodes: &[Var],
        layer: usize,
    ) -> Result<(Vec<Var>, Vec<EdgeAttention>)> {
        if nodes.len() != g.n_nodes() {
            return Err(ModelError::Input(format!(
                "{} node embeddings for {} nodes",
                nodes.len(),
                g.n_nodes()
            )));
        }
        let hh = self.cfg.head_dim();
        let heads = self.cfg.heads;
        let slope = self.slope();
        let params = &self.layout.rgat[layer];

        let mut slices = Vec::with_capacity(nodes.len());
        for &n in nodes {
            let mut per_head = Vec::with_capacity(heads);
            for k in 0..heads {
                per_head.push(if heads == 1 { n } else { tape.slice(n, k * hh, hh)? });
            }
            slices.push(per_head);
        }

        let mut out = Vec::with_capacity(nodes.len());
        let mut trace = Vec::new();
        for i in 0..g.n_nodes() {
            let edges: Vec<Edge> = g.in_edges(i).copied().collect();
            if edges.is_empty() {
                out.push(nodes[i]);
                continue;
            }
            let mut head_out = Vec::with_capacity(heads);
            let mut alphas = vec![Vec::with_capacity(heads); edges.len()];
            for k in 0..heads {
                let mut logits = Vec::with_capacity(edges.len());
                let mut values = Vec::with_capacity(edges.len());
                for e in &edges {
                    let hp = params[e.kind.index()][k];
                    let wq = tape.param(&self.params, hp.wq)?;
                    let wk = tape.param(&self.params, hp.wk)?;
                    let wv = tape.param(&self.params, hp.wv)?;
                    let q = tape.matvec(wq, slices[i][k])?;
                    let kk = tape.matvec(wk, slices[e.src][k])?;
                    let a = tape.add(q, kk)?;
                    logits.push(tape.leaky_relu(a, slope)?);
                    values.push(tape.matvec(wv, nodes[e.src])?);
                }
                let lv = tape.concat(&logits)?;
                let alpha = tape.softmax(lv, 0)?;
                for (slot, a) in alphas.iter_mut().zip(tape.value(alpha).data()) {
                    slot.push(a.to_f64_lossy());
                }
                let vm = tape.stack(&values)?;
                let agg = tape.vecmat(alpha, vm)?;
                head_out.push(tape.leaky_relu(agg, slope)?);
            }
            let h = if heads == 1 {
                head_out[0]
            } else {
                tape.concat(&head_out)?
            };
            out.push(tape.add(h, nodes[i])?);
            for (e, alpha) in edges.iter().zip(alphas) {
                trace.push(EdgeAttention {
                    src: e.src,
                    dst: e.dst,
                    kind: e.kind,
                    alpha,
                });
            }
        }
        Ok((out, trace))
    }

    /// Graph representation fed to the head, plus the attention trace.
    fn graph_repr(&self, tape: &mut Tape<T>, g: &HeteroGraph) -> Result<(Var, AttentionTrace)> {
        let mut trace = AttentionTrace::default();
        if self.cfg.ablations.no_graph {
            let z = tape.input(Tensor::zeros(&[self.cfg.hidden]))?;
            return Ok((z, trace));
        }
        let mut nodes = self.init_nodes(tape, g)?;
        for l in 0..self.cfg.layers {
            let (next, t) = self.rgat_forward(tape, g, &nodes, l)?;
            nodes = next;
            trace.layers.push(t);
        }
        if self.cfg.ablations.no_dummy {
            let history = &nodes[..g.dummy()];
            if history.is_empty() {
                return Err(ModelError::Input("graph has no history nodes".into()));
            }
            let m = tape.stack(history)?;
            let mean = tape.mean_rows(m)?;
            let max = tape.max_rows(m)?;
            Ok((tape.concat(&[mean, max])?, trace))
        } else {
            Ok((nodes[g.dummy()], trace))
        }
    }

    /// Unnormalized class scores for one graph and context embedding.
    pub fn forward(&self, tape: &mut Tape<T>, g: &HeteroGraph, context: &[f64]) -> Result<Forward> {
        if context.len() != self.cfg.d_ctx {
            return Err(ModelError::Input(format!(
                "context dimension {} != d_ctx {}",
                context.len(),
                self.cfg.d_ctx
            )));
        }
        let (graph, trace) = self.graph_repr(tape, g)?;
        let ctx = tape.input(Tensor::vector(to_real(context)))?;
        let x = tape.concat(&[ctx, graph])?;
        let w1 = tape.param(&self.params, self.layout.w1)?;
        let b1 = tape.param(&self.params, self.layout.b1)?;
        let w2 = tape.param(&self.params, self.layout.w2)?;
        let b2 = tape.param(&self.params, self.layout.b2)?;
        let pre = tape.matvec(w1, x)?;
        let pre = tape.add(pre, b1)?;
        let hid = tape.leaky_relu(pre, self.slope())?;
        let out = tape.matvec(w2, hid)?;
        let logits = tape.add(out, b2)?;
        Ok(Forward { logits, trace })
    }

    /// Class probabilities and the attention trace.
    pub fn predict(&self, g: &HeteroGraph, context: &[f64]) -> Result<(Vec<f64>, AttentionTrace)> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, g, context)?;
        let p = tape.softmax(f.logits, 0)?;
        let probs = tape.value(p).data().iter().map(|v| v.to_f64_lossy()).collect();
        Ok((probs, f.trace))
    }

    /// Loss and parameter gradients for one labelled graph.
    pub fn loss_and_grads(
        &self,
        g: &HeteroGraph,
        context: &[f64],
        target: usize,
        weight: f64,
        checked: bool,
    ) -> Result<(f64, Gradients<T>)> {
        let mut tape = if checked { Tape::checked() } else { Tape::new() };
        let f = self.forward(&mut tape, g, context)?;
        let l = weighted_ce(&mut tape, f.logits, target, weight)?;
        let loss = tape.scalar(l).to_f64_lossy();
        Ok((loss, tape.backward(l)?))
    }
}

/// `-weight * log softmax(logits)[target]`, computed from logits.
pub fn weighted_ce<T: Real>(tape: &mut Tape<T>, logits: Var, target: usize, weight: f64) -> Result<Var> {
    let n = tape.value(logits).len();
    if target >= n {
        return Err(ModelError::Input(format!("target {target} >= {n} classes")));
    }
    let ls = tape.log_softmax(logits, 0)?;
    let picked = tape.slice(ls, target, 1)?;
    Ok(tape.scale(picked, -T::from_f64_lossy(weight))?)
}
