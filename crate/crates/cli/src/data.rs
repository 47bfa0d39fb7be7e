//! Corpus loading, splitting and example preparation shared by commands.

use emodynamix::corpus::{
    load_corpus, split_dialogues, window_corpus, Dialogue, LoadStats, StrategySet, WindowSample,
};
use emodynamix::features::{FallbackProvider, FeatureProvider, FileProvider};
use emodynamix::graph::GraphOptions;
use emodynamix::train::{prepare_examples, Example};

use crate::config::{RunConfig, FALLBACK};
use crate::error::{CliError, Result};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

pub struct Corpus {
    pub set: StrategySet,
    /// Dialogues per split, in `SPLITS` order.
    pub splits: [Vec<Dialogue>; 3],
    pub load: LoadStats,
}

pub fn load(cfg: &RunConfig) -> Result<Corpus> {
    cfg.validate()?;
    let set = cfg.strategy_set()?;
    let c = &cfg.corpus;
    let mut load = LoadStats::default();
    let mut read = |p: &std::path::Path| -> Result<Vec<Dialogue>> {
        let (d, s) = load_corpus(p, c.schema, &set)?;
        load.kept += s.kept;
        load.dropped_low_quality += s.dropped_low_quality;
        Ok(d)
    };
    let splits = match &c.path {
        Some(p) => {
            let all = read(p)?;
            let s = split_dialogues(&all, c.split, cfg.seed);
            [s.train, s.dev, s.test]
        }
        None => {
            let mut out: [Vec<Dialogue>; 3] = Default::default();
            for (slot, p) in out.iter_mut().zip([&c.train, &c.dev, &c.test]) {
                if let Some(p) = p {
                    *slot = read(p)?;
                }
            }
            out
        }
    };
    Ok(Corpus { set, splits, load })
}

pub struct Windowed {
    pub samples: [Vec<WindowSample>; 3],
    /// Agent turns without history, per split.
    pub skipped: [usize; 3],
}

pub fn window(corpus: &Corpus, window: usize) -> Windowed {
    let mut samples: [Vec<WindowSample>; 3] = Default::default();
    let mut skipped = [0; 3];
    for i in 0..3 {
        (samples[i], skipped[i]) = window_corpus(&corpus.splits[i], window);
    }
    Windowed { samples, skipped }
}

pub fn provider(cfg: &RunConfig) -> Result<Box<dyn FeatureProvider>> {
    if cfg.features == FALLBACK {
        Ok(Box::new(FallbackProvider::new(cfg.model.d_ctx)))
    } else {
        Ok(Box::new(FileProvider::load(cfg.features.as_ref())?))
    }
}

/// Everything a training or evaluation command needs.
pub struct Prepared {
    pub set: StrategySet,
    pub windowed: Windowed,
    pub provider: Box<dyn FeatureProvider>,
}

impl Prepared {
    /// Loads the data and fills the data-dependent model sizes into `cfg`.
    pub fn new(cfg: &mut RunConfig) -> Result<Self> {
        let corpus = load(cfg)?;
        let windowed = window(&corpus, cfg.window);
        let provider = provider(cfg)?;
        cfg.model.d_ctx = provider.d_ctx();
        cfg.model.n_strategies = corpus.set.len();
        Ok(Self {
            set: corpus.set,
            windowed,
            provider,
        })
    }

    pub fn examples(&self, split: usize, opts: GraphOptions) -> Result<Vec<Example>> {
        Ok(prepare_examples(
            &self.windowed.samples[split],
            self.provider.as_ref(),
            &self.set,
            opts,
        )?)
    }

    /// Train, dev and test examples.
    pub fn all_examples(&self, opts: GraphOptions) -> Result<[Vec<Example>; 3]> {
        Ok([
            self.examples(0, opts)?,
            self.examples(1, opts)?,
            self.examples(2, opts)?,
        ])
    }

    pub fn class_weights(&self, enabled: bool) -> Result<Option<Vec<f64>>> {
        if !enabled {
            return Ok(None);
        }
        emodynamix::corpus::class_weights(&self.windowed.samples[0], &self.set)
            .map(Some)
            .map_err(|e| CliError::Data(format!("{e}; set class_weights = false to train anyway")))
    }
}

pub fn split_index(name: &str) -> Result<usize> {
    SPLITS
        .iter()
        .position(|s| *s == name)
        .ok_or_else(|| CliError::Usage(format!("unknown split {name:?}; expected train, dev or test")))
}
