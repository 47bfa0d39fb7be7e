#![allow(dead_code)]

use emodynamix::corpus::{Role, StrategySet, Turn, WindowSample};
use emodynamix::features::{DiscourseEdge, EmotionLogits, FeatureBundle, EMOTIONS, RELATIONS};
use emodynamix::graph::{build_graph, GraphOptions};
use emodynamix::model::ModelConfig;
use emodynamix::train::Example;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(n_strategies: usize, d_ctx: usize) -> ModelConfig {
    ModelConfig {
        hidden: 4,
        layers: 2,
        heads: 2,
        d_ctx,
        n_strategies,
        mlp_hidden: 4,
        ..Default::default()
    }
}

/// Random window of `n_turns` turns with random logits, discourse edges of
/// random relation and a random context vector.
pub fn random_window(
    rng: &mut ChaCha8Rng,
    n_turns: usize,
    set: &StrategySet,
    d_ctx: usize,
    logit_scale: f64,
) -> (WindowSample, FeatureBundle) {
    let history: Vec<Turn> = (0..n_turns)
        .map(|_| {
            let agent = rng.gen_bool(0.5);
            Turn {
                role: if agent { Role::Agent } else { Role::User },
                text: String::new(),
                strategy: agent.then(|| rng.gen_range(0..set.len())),
            }
        })
        .collect();
    let sample = WindowSample {
        dialogue_id: format!("r{}", rng.gen::<u32>()),
        history,
        target_strategy: rng.gen_range(0..set.len()),
        target_position: n_turns,
    };
    let emotions = sample
        .user_turns()
        .map(|i| EmotionLogits {
            turn_index: i,
            z: (0..EMOTIONS.len()).map(|_| rng.gen_range(-logit_scale..logit_scale)).collect(),
        })
        .collect();
    let mut discourse = Vec::new();
    for dst in 1..n_turns {
        if rng.gen_bool(0.8) {
            discourse.push(DiscourseEdge {
                src: rng.gen_range(0..dst),
                dst,
                relation: rng.gen_range(0..RELATIONS.len()),
            });
        }
    }
    let bundle = FeatureBundle {
        dialogue_id: sample.dialogue_id.clone(),
        target_position: sample.target_position,
        emotions,
        discourse,
        context: (0..d_ctx).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    (sample, bundle)
}

pub fn random_example(rng: &mut ChaCha8Rng, n_turns: usize, set: &StrategySet, d_ctx: usize) -> Example {
    scaled_example(rng, n_turns, set, d_ctx, 3.0)
}

pub fn scaled_example(
    rng: &mut ChaCha8Rng,
    n_turns: usize,
    set: &StrategySet,
    d_ctx: usize,
    logit_scale: f64,
) -> Example {
    let (s, b) = random_window(rng, n_turns, set, d_ctx, logit_scale);
    let graph = build_graph(&s, &b, set, GraphOptions::default()).expect("valid random graph");
    Example {
        dialogue_id: s.dialogue_id,
        target_position: s.target_position,
        graph,
        context: b.context,
        target: s.target_strategy,
    }
}
