//! Run configuration: a TOML file overlaid by command-line flags.
//!
//! ```toml
//! seed = 7
//! out = "runs/annomi"
//! features = "fallback"
//!
//! [corpus]
//! schema = "annomi"
//! path = "data/annomi.jsonl"
//! split = [8, 1, 1]
//!
//! [model]
//! hidden = 512
//!
//! [train]
//! total_steps = 3000
//! ```
//!
//! Relative paths in the file are resolved against the file's directory.

use std::path::{Path, PathBuf};

use emodynamix::corpus::{Schema, StrategySet};
use emodynamix::model::ModelConfig;
use emodynamix::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const FALLBACK: &str = "fallback";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub schema: Schema,
    /// Single corpus file, split by `split`.
    pub path: Option<PathBuf>,
    /// Pre-split corpus files; used instead of `path`.
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub split: [usize; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            schema: Schema::Generic,
            path: None,
            train: None,
            dev: None,
            test: None,
            split: [8, 1, 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Governs the split, parameter initialization and batch order;
    /// `train.seed` is overwritten with it.
    pub seed: u64,
    pub out: PathBuf,
    /// Number of preceding turns in each sample.
    pub window: usize,
    /// Feature file path, or "fallback".
    pub features: String,
    /// Built-in strategy registry; defaults to the schema's own.
    pub strategies: Option<String>,
    /// Custom strategy labels, in class order.
    pub strategy_labels: Option<Vec<String>>,
    /// Inverse-frequency class weights in the loss.
    pub class_weights: bool,
    /// Initial temperatures for the tau sweep.
    pub taus: Vec<f64>,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out: PathBuf::from("out"),
            window: 5,
            features: FALLBACK.into(),
            strategies: None,
            strategy_labels: None,
            class_weights: true,
            taus: vec![0.1, 0.5, 1.0, 2.0],
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub features: Option<String>,
    pub ablate: Vec<String>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub taus: Option<Vec<f64>>,
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        rebase(base, &mut cfg.out);
        for p in [
            &mut cfg.corpus.path,
            &mut cfg.corpus.train,
            &mut cfg.corpus.dev,
            &mut cfg.corpus.test,
        ]
        .into_iter()
        .flatten()
        {
            rebase(base, p);
        }
        if cfg.features != FALLBACK {
            let mut p = PathBuf::from(&cfg.features);
            rebase(base, &mut p);
            cfg.features = p.to_string_lossy().into_owned();
        }
        Ok(cfg)
    }

    /// Defaults, then the optional file, then flags.
    pub fn resolve(file: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(f) = &o.features {
            cfg.features = f.clone();
        }
        if let Some(out) = &o.out {
            cfg.out = out.clone();
        }
        if let Some(t) = o.threads {
            cfg.train.threads = t;
        }
        if let Some(t) = &o.taus {
            cfg.taus = t.clone();
        }
        for name in &o.ablate {
            if !cfg.model.ablations.enable(name) {
                return Err(CliError::Usage(format!("unknown ablation {name:?}")));
            }
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn strategy_set(&self) -> Result<StrategySet> {
        if let Some(labels) = &self.strategy_labels {
            return Ok(StrategySet::new("custom", labels.clone())?);
        }
        if let Some(name) = &self.strategies {
            return StrategySet::builtin(name)
                .ok_or_else(|| CliError::Config(format!("unknown strategy set {name:?}")));
        }
        self.corpus.schema.strategy_set().ok_or_else(|| {
            CliError::Config("the generic schema needs `strategies` or `strategy_labels`".into())
        })
    }

    /// Check everything that does not need the data itself.
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(CliError::Config("window must be >= 1".into()));
        }
        let c = &self.corpus;
        let split_files = [&c.train, &c.dev, &c.test];
        match (&c.path, split_files.iter().any(|p| p.is_some())) {
            (Some(_), true) => {
                return Err(CliError::Config(
                    "corpus.path and corpus.train/dev/test are alternatives".into(),
                ))
            }
            (None, false) => {
                return Err(CliError::Config(
                    "no corpus: set corpus.path or corpus.train".into(),
                ))
            }
            (None, true) if c.train.is_none() => {
                return Err(CliError::Config("corpus.train is required with split files".into()))
            }
            _ => {}
        }
        if c.path.is_some() && c.split.iter().sum::<usize>() == 0 {
            return Err(CliError::Config("corpus.split must not be all zero".into()));
        }
        let mut paths: Vec<&PathBuf> = [&c.path, &c.train, &c.dev, &c.test].into_iter().flatten().collect();
        let features = PathBuf::from(&self.features);
        if self.features != FALLBACK {
            paths.push(&features);
        }
        for p in paths {
            if !p.is_file() {
                return Err(CliError::Config(format!("file not found: {}", p.display())));
            }
        }
        if self.taus.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(CliError::Config("taus must be positive".into()));
        }
        self.strategy_set()?;
        let mut m = self.model.clone();
        // Data-dependent sizes are filled in later; check the rest now.
        m.n_strategies = m.n_strategies.max(2);
        m.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

pub fn parse_taus(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect()
}
