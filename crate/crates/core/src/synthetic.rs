//! Generated corpora for sanity runs and tests.
//!
//! [`separable`] builds dialogues whose next strategy is a fixed function of
//! the last user turn's dominant emotion, with that emotion planted directly
//! into the ERC logits served by [`PlantedProvider`]. Texts carry no signal.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dialogue, Role, StrategySet, Turn, WindowSample};
use crate::features::{
    FallbackProvider, FeatureBundle, FeatureProvider, Result, EMOTIONS, NEUTRAL,
};

const FILLER_WORDS: [&str; 24] = [
    "okay", "well", "so", "the", "day", "work", "then", "maybe", "about", "week", "with", "some",
    "things", "there", "after", "when", "just", "it", "was", "like", "that", "and", "time", "home",
];

/// Emotions that trigger a non-filler strategy, by index into `EMOTIONS`.
pub const PLANTED_EMOTIONS: [usize; 4] = [0, 2, 3, 5];

pub const SEPARABLE_STRATEGIES: [&str; 5] = ["Filler", "Calm", "Reassure", "Celebrate", "Console"];

fn filler_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(3..9);
    (0..n)
        .map(|_| *FILLER_WORDS.choose(rng).expect("non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn planted_logits(rng: &mut ChaCha8Rng, emotion: usize) -> Vec<f64> {
    let mut z: Vec<f64> = (0..EMOTIONS.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    z[emotion] += 4.0;
    z
}

/// Strategy the separable corpus assigns to an emotion.
pub fn strategy_for(emotion: usize) -> usize {
    PLANTED_EMOTIONS
        .iter()
        .position(|&e| e == emotion)
        .map_or(0, |p| p + 1)
}

pub struct SyntheticCorpus {
    pub set: StrategySet,
    pub dialogues: Vec<Dialogue>,
    /// Planted logits keyed by `(dialogue id, absolute turn index)`.
    pub logits: HashMap<(String, usize), Vec<f64>>,
}

/// Dialogues of the form `[U neutral, A Filler]? U emotional, A f(emotion)`.
pub fn separable(n_dialogues: usize, seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = StrategySet::new(
        "separable",
        SEPARABLE_STRATEGIES.iter().map(|s| s.to_string()).collect(),
    )
    .expect("valid strategy set");
    let mut dialogues = Vec::with_capacity(n_dialogues);
    let mut logits = HashMap::new();
    for d in 0..n_dialogues {
        let id = format!("syn{d:05}");
        let mut turns = Vec::new();
        let mut user = |turns: &mut Vec<Turn>, rng: &mut ChaCha8Rng, emotion: usize| {
            logits.insert((id.clone(), turns.len()), planted_logits(rng, emotion));
            turns.push(Turn {
                role: Role::User,
                text: filler_text(rng),
                strategy: None,
            });
        };
        if rng.gen_bool(0.5) {
            user(&mut turns, &mut rng, NEUTRAL);
            turns.push(Turn {
                role: Role::Agent,
                text: filler_text(&mut rng),
                strategy: Some(0),
            });
        }
        let e = *PLANTED_EMOTIONS.choose(&mut rng).expect("non-empty");
        user(&mut turns, &mut rng, e);
        turns.push(Turn {
            role: Role::Agent,
            text: filler_text(&mut rng),
            strategy: Some(strategy_for(e)),
        });
        dialogues.push(Dialogue { id, turns });
    }
    SyntheticCorpus {
        set,
        dialogues,
        logits,
    }
}

impl SyntheticCorpus {
    /// Provider serving the planted logits. With `scramble`, the logits are
    /// permuted across all user turns of the corpus first.
    pub fn provider(&self, d_ctx: usize, scramble: Option<u64>) -> PlantedProvider {
        let mut logits = self.logits.clone();
        if let Some(seed) = scramble {
            let mut keys: Vec<_> = self.logits.keys().cloned().collect();
            keys.sort();
            let mut values: Vec<_> = keys.iter().map(|k| self.logits[k].clone()).collect();
            values.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            logits = keys.into_iter().zip(values).collect();
        }
        PlantedProvider {
            inner: FallbackProvider::new(d_ctx),
            logits,
        }
    }
}

/// Fallback context and discourse, planted emotion logits.
pub struct PlantedProvider {
    inner: FallbackProvider,
    logits: HashMap<(String, usize), Vec<f64>>,
}

impl FeatureProvider for PlantedProvider {
    fn provide(&self, sample: &WindowSample) -> Result<FeatureBundle> {
        let mut b = self.inner.provide(sample)?;
        let start = sample.target_position - sample.history.len();
        for e in &mut b.emotions {
            let key = (sample.dialogue_id.clone(), start + e.turn_index);
            if let Some(z) = self.logits.get(&key) {
                e.z = z.clone();
            }
        }
        Ok(b)
    }

    fn d_ctx(&self) -> usize {
        self.inner.d_ctx()
    }
}

/// Alternating dialogues with random filler text and uniformly random
/// strategies.
pub fn random_dialogues(n_dialogues: usize, pairs: usize, n_strategies: usize, seed: u64) -> Vec<Dialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_dialogues)
        .map(|d| Dialogue {
            id: format!("rnd{d:05}"),
            turns: (0..2 * pairs)
                .map(|i| {
                    let agent = i % 2 == 1;
                    Turn {
                        role: if agent { Role::Agent } else { Role::User },
                        text: filler_text(&mut rng),
                        strategy: agent.then(|| rng.gen_range(0..n_strategies)),
                    }
                })
                .collect(),
        })
        .collect()
}
