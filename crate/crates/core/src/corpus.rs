//! Dialogue corpora, strategy registries and sliding-window samples.
//!
//! Corpus files are line-delimited JSON, one dialogue per line:
//!
//! ```text
//! {"id": "d1", "quality": "high", "turns": [{"role": "user", "text": "..."},
//!                                           {"role": "agent", "text": "...", "strategy": "Question"}]}
//! ```
//!
//! `quality` is optional and only consulted for the AnnoMI schema.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown strategy label {label:?}")]
    UnknownStrategy { line: usize, label: String },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
    #[error("invalid strategy set: {0}")]
    StrategySet(String),
    #[error("classes without samples: {0:?}")]
    EmptyClasses(Vec<String>),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Ordered strategy vocabulary; a label's index is its class id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategySet {
    pub name: String,
    pub labels: Vec<String>,
    /// Extra surface forms mapped onto a canonical label.
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
}

pub const ESCONV_STRATEGIES: [&str; 8] = [
    "Question",
    "Restatement or Paraphrasing",
    "Reflection of Feelings",
    "Self-disclosure",
    "Affirmation and Reassurance",
    "Providing Suggestions",
    "Information",
    "Others",
];

pub const ANNOMI_STRATEGIES: [&str; 7] = [
    "Question open",
    "Question closed",
    "Reflection simple",
    "Reflection complex",
    "Provide suggestion",
    "Provide information",
    "Other",
];

/// Fine-grained AnnoMI therapist behaviours and their merged label.
const ANNOMI_ALIASES: [(&str, &str); 10] = [
    ("Open Question", "Question open"),
    ("Closed Question", "Question closed"),
    ("Simple Reflection", "Reflection simple"),
    ("Complex Reflection", "Reflection complex"),
    ("Advice", "Provide suggestion"),
    ("Giving Options", "Provide suggestion"),
    ("Options", "Provide suggestion"),
    ("Negotiation/Goal-setting", "Provide suggestion"),
    ("Goal-setting", "Provide suggestion"),
    ("Information", "Provide information"),
];

impl StrategySet {
    pub fn new(name: impl Into<String>, labels: Vec<String>) -> Result<Self> {
        let set = Self {
            name: name.into(),
            labels,
            aliases: BTreeMap::new(),
        };
        set.check()?;
        Ok(set)
    }

    pub fn esconv() -> Self {
        Self {
            name: "esconv".into(),
            labels: ESCONV_STRATEGIES.iter().map(|s| s.to_string()).collect(),
            aliases: BTreeMap::new(),
        }
    }

    pub fn annomi() -> Self {
        Self {
            name: "annomi".into(),
            labels: ANNOMI_STRATEGIES.iter().map(|s| s.to_string()).collect(),
            aliases: ANNOMI_ALIASES
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "esconv" => Some(Self::esconv()),
            "annomi" => Some(Self::annomi()),
            _ => None,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.labels.len() < 2 {
            return Err(CorpusError::StrategySet("need at least 2 labels".into()));
        }
        for (i, l) in self.labels.iter().enumerate() {
            if l.trim().is_empty() {
                return Err(CorpusError::StrategySet(format!("label {i} is empty")));
            }
            if self.labels[..i].iter().any(|o| o.eq_ignore_ascii_case(l)) {
                return Err(CorpusError::StrategySet(format!("duplicate label {l:?}")));
            }
        }
        for (alias, target) in &self.aliases {
            if self.position(target).is_none() {
                return Err(CorpusError::StrategySet(format!(
                    "alias {alias:?} targets unknown label {target:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn position(&self, label: &str) -> Option<usize> {
        let label = label.trim();
        self.labels.iter().position(|l| l.eq_ignore_ascii_case(label))
    }

    /// Resolve a label or alias, case-insensitively.
    pub fn index(&self, label: &str) -> Option<usize> {
        self.position(label).or_else(|| {
            self.aliases
                .iter()
                .find(|(a, _)| a.eq_ignore_ascii_case(label.trim()))
                .and_then(|(_, t)| self.position(t))
        })
    }

    pub fn label(&self, idx: usize) -> &str {
        &self.labels[idx]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Agent,
}

impl Role {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "user" | "seeker" | "client" | "usr" => Some(Role::User),
            "agent" | "system" | "supporter" | "therapist" | "sys" => Some(Role::Agent),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Agent => "agent",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    /// Class index; present exactly for agent turns.
    pub strategy: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

/// History window preceding one agent turn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSample {
    pub dialogue_id: String,
    pub history: Vec<Turn>,
    pub target_strategy: usize,
    pub target_position: usize,
}

impl WindowSample {
    pub fn key(&self) -> (String, usize) {
        (self.dialogue_id.clone(), self.target_position)
    }

    pub fn user_turns(&self) -> impl Iterator<Item = usize> + '_ {
        self.history
            .iter()
            .enumerate()
            .filter(|(_, t)| t.role == Role::User)
            .map(|(i, _)| i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    Esconv,
    Annomi,
    Generic,
}

impl Schema {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "esconv" => Some(Schema::Esconv),
            "annomi" => Some(Schema::Annomi),
            "generic" => Some(Schema::Generic),
            _ => None,
        }
    }

    /// Built-in strategy registry for this schema, if it has one.
    pub fn strategy_set(self) -> Option<StrategySet> {
        match self {
            Schema::Esconv => Some(StrategySet::esconv()),
            Schema::Annomi => Some(StrategySet::annomi()),
            Schema::Generic => None,
        }
    }
}

#[derive(Deserialize, Serialize)]
struct RawTurn {
    role: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    strategy: Option<String>,
}

#[derive(Deserialize, Serialize)]
struct RawDialogue {
    id: String,
    turns: Vec<RawTurn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quality: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub kept: usize,
    pub dropped_low_quality: usize,
}

fn convert(raw: RawDialogue, line: usize, set: &StrategySet) -> Result<Dialogue> {
    if raw.turns.is_empty() {
        return Err(CorpusError::Invalid {
            line,
            msg: format!("dialogue {:?} has no turns", raw.id),
        });
    }
    let mut turns = Vec::with_capacity(raw.turns.len());
    for (t, rt) in raw.turns.into_iter().enumerate() {
        let role = Role::parse(&rt.role).ok_or_else(|| CorpusError::Invalid {
            line,
            msg: format!("turn {t}: unknown role {:?}", rt.role),
        })?;
        let strategy = match (role, rt.strategy) {
            (Role::Agent, Some(label)) => {
                Some(set.index(&label).ok_or(CorpusError::UnknownStrategy { line, label })?)
            }
            (Role::Agent, None) => {
                return Err(CorpusError::Invalid {
                    line,
                    msg: format!("turn {t}: agent turn without strategy"),
                })
            }
            (Role::User, Some(label)) => {
                return Err(CorpusError::Invalid {
                    line,
                    msg: format!("turn {t}: user turn carries strategy {label:?}"),
                })
            }
            (Role::User, None) => None,
        };
        turns.push(Turn {
            role,
            text: rt.text,
            strategy,
        });
    }
    Ok(Dialogue { id: raw.id, turns })
}

/// Parse a corpus file; AnnoMI low-quality dialogues are dropped.
pub fn load_corpus(
    path: &Path,
    schema: Schema,
    set: &StrategySet,
) -> Result<(Vec<Dialogue>, LoadStats)> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut stats = LoadStats::default();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDialogue = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if schema == Schema::Annomi
            && raw
                .quality
                .as_deref()
                .is_some_and(|q| q.eq_ignore_ascii_case("low"))
        {
            stats.dropped_low_quality += 1;
            continue;
        }
        out.push(convert(raw, lineno, set)?);
    }
    stats.kept = out.len();
    Ok((out, stats))
}

/// Serialize dialogues in the corpus line format, strategies by name.
pub fn write_corpus(path: &Path, dialogues: &[Dialogue], set: &StrategySet) -> Result<()> {
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(File::create(path).map_err(io)?);
    for d in dialogues {
        let raw = RawDialogue {
            id: d.id.clone(),
            quality: None,
            turns: d
                .turns
                .iter()
                .map(|t| RawTurn {
                    role: t.role.tag().into(),
                    text: t.text.clone(),
                    strategy: t.strategy.map(|s| set.label(s).to_string()),
                })
                .collect(),
        };
        let line = serde_json::to_string(&raw).expect("serializable");
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

/// One sample per agent turn that has at least one predecessor.
///
/// Returns the samples and the number of agent turns skipped for lack of
/// history.
pub fn window_samples(d: &Dialogue, window: usize) -> (Vec<WindowSample>, usize) {
    let window = window.max(1);
    let mut skipped = 0;
    let mut out = Vec::new();
    for (pos, turn) in d.turns.iter().enumerate() {
        let Some(strategy) = turn.strategy.filter(|_| turn.role == Role::Agent) else {
            continue;
        };
        if pos == 0 {
            skipped += 1;
            continue;
        }
        let start = pos.saturating_sub(window);
        out.push(WindowSample {
            dialogue_id: d.id.clone(),
            history: d.turns[start..pos].to_vec(),
            target_strategy: strategy,
            target_position: pos,
        });
    }
    (out, skipped)
}

/// Window every dialogue, concatenating in corpus order.
pub fn window_corpus(dialogues: &[Dialogue], window: usize) -> (Vec<WindowSample>, usize) {
    let mut all = Vec::new();
    let mut skipped = 0;
    for d in dialogues {
        let (s, k) = window_samples(d, window);
        all.extend(s);
        skipped += k;
    }
    (all, skipped)
}

pub fn class_counts(samples: &[WindowSample], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for s in samples {
        counts[s.target_strategy] += 1;
    }
    counts
}

/// Inverse-frequency weights `N / (|S| * N_c)`.
pub fn class_weights(samples: &[WindowSample], set: &StrategySet) -> Result<Vec<f64>> {
    let counts = class_counts(samples, set.len());
    let empty: Vec<String> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(i, _)| set.label(i).to_string())
        .collect();
    if !empty.is_empty() {
        return Err(CorpusError::EmptyClasses(empty));
    }
    let total = samples.len() as f64;
    let k = set.len() as f64;
    Ok(counts.iter().map(|&c| total / (k * c as f64)).collect())
}

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

/// Seeded dialogue-level split by integer ratios (e.g. `[8, 1, 1]`).
pub fn split_dialogues(dialogues: &[Dialogue], ratio: [usize; 3], seed: u64) -> Splits {
    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total: usize = ratio.iter().sum::<usize>().max(1);
    let n = dialogues.len();
    let n_train = n * ratio[0] / total;
    let n_dev = n * ratio[1] / total;
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| dialogues[i].clone()).collect()
    };
    Splits {
        train: pick(&order[..n_train]),
        dev: pick(&order[n_train..n_train + n_dev]),
        test: pick(&order[n_train + n_dev..]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn turn(role: Role, s: Option<usize>) -> Turn {
        Turn {
            role,
            text: format!("{role:?}"),
            strategy: s,
        }
    }

    fn write(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn builtin_registries() {
        assert_eq!(StrategySet::esconv().len(), 8);
        assert_eq!(StrategySet::annomi().len(), 7);
        StrategySet::esconv().check().unwrap();
        StrategySet::annomi().check().unwrap();
        let a = StrategySet::annomi();
        let merged = a.index("Provide suggestion").unwrap();
        for raw in ["Advice", "Giving Options", "Negotiation/Goal-setting"] {
            assert_eq!(a.index(raw), Some(merged), "{raw}");
        }
        assert_eq!(StrategySet::esconv().index("reflection of feelings"), Some(2));
    }

    #[test]
    fn strategy_set_rejects_duplicates_and_singletons() {
        assert!(StrategySet::new("x", vec!["a".into()]).is_err());
        assert!(StrategySet::new("x", vec!["a".into(), "A".into()]).is_err());
        assert!(StrategySet::new("x", vec!["a".into(), "".into()]).is_err());
    }

    #[test]
    fn minimal_file_loads() {
        let f = write(&[
            r#"{"id":"d","turns":[{"role":"user","text":"hi"},{"role":"agent","text":"hello","strategy":"Question"}]}"#,
        ]);
        let (ds, stats) = load_corpus(f.path(), Schema::Esconv, &StrategySet::esconv()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(stats.kept, 1);
        assert_eq!(ds[0].turns[1].strategy, Some(0));
        assert_eq!(ds[0].turns[0].strategy, None);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write(&[
            r#"{"id":"d","turns":[{"role":"user","text":"hi"}]}"#,
            "{not json",
        ]);
        let err = load_corpus(f.path(), Schema::Esconv, &StrategySet::esconv()).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn unknown_strategy_is_named() {
        let f = write(&[
            r#"{"id":"d","turns":[{"role":"user","text":"hi"},{"role":"agent","text":"x","strategy":"Hypnosis"}]}"#,
        ]);
        let err = load_corpus(f.path(), Schema::Esconv, &StrategySet::esconv()).unwrap_err();
        assert!(err.to_string().contains("Hypnosis"), "{err}");
    }

    #[test]
    fn role_strategy_invariants_enforced() {
        let agent_no_label = write(&[r#"{"id":"d","turns":[{"role":"agent","text":"x"}]}"#]);
        assert!(load_corpus(agent_no_label.path(), Schema::Esconv, &StrategySet::esconv()).is_err());
        let user_label =
            write(&[r#"{"id":"d","turns":[{"role":"user","text":"x","strategy":"Question"}]}"#]);
        assert!(load_corpus(user_label.path(), Schema::Esconv, &StrategySet::esconv()).is_err());
        let empty = write(&[r#"{"id":"d","turns":[]}"#]);
        assert!(load_corpus(empty.path(), Schema::Esconv, &StrategySet::esconv()).is_err());
    }

    #[test]
    fn annomi_merges_and_drops_low_quality() {
        let f = write(&[
            r#"{"id":"a","quality":"high","turns":[{"role":"client","text":"x"},{"role":"therapist","text":"y","strategy":"Advice"}]}"#,
            r#"{"id":"b","quality":"low","turns":[{"role":"client","text":"x"},{"role":"therapist","text":"y","strategy":"Other"}]}"#,
            r#"{"id":"c","turns":[{"role":"client","text":"x"},{"role":"therapist","text":"y","strategy":"Giving Options"}]}"#,
        ]);
        let set = StrategySet::annomi();
        let (ds, stats) = load_corpus(f.path(), Schema::Annomi, &set).unwrap();
        assert_eq!(stats.dropped_low_quality, 1);
        assert_eq!(ds.len(), 2);
        let merged = set.index("Provide suggestion");
        assert_eq!(ds[0].turns[1].strategy, merged);
        assert_eq!(ds[1].turns[1].strategy, merged);
    }

    #[test]
    fn windows_of_alternating_dialogue() {
        let d = Dialogue {
            id: "d".into(),
            turns: vec![
                turn(Role::User, None),
                turn(Role::Agent, Some(1)),
                turn(Role::User, None),
                turn(Role::Agent, Some(0)),
            ],
        };
        let (s, skipped) = window_samples(&d, 5);
        assert_eq!(skipped, 0);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].history.len(), 1);
        assert_eq!(s[1].history.len(), 3);
        assert_eq!(s[1].target_strategy, 0);
        assert_eq!(s[1].target_position, 3);
    }

    #[test]
    fn leading_agent_turn_is_skipped() {
        let d = Dialogue {
            id: "d".into(),
            turns: vec![
                turn(Role::Agent, Some(0)),
                turn(Role::Agent, Some(1)),
                turn(Role::User, None),
            ],
        };
        let (s, skipped) = window_samples(&d, 5);
        assert_eq!(skipped, 1);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].history.len(), 1);
    }

    #[test]
    fn class_weight_arithmetic() {
        let set = StrategySet::new("t", vec!["a".into(), "b".into()]).unwrap();
        let mk = |c: usize| WindowSample {
            dialogue_id: "d".into(),
            history: vec![turn(Role::User, None)],
            target_strategy: c,
            target_position: 1,
        };
        let balanced: Vec<_> = (0..20).map(|i| mk(i % 2)).collect();
        assert_eq!(class_weights(&balanced, &set).unwrap(), vec![1.0, 1.0]);
        let skewed: Vec<_> = (0..40).map(|i| mk(usize::from(i >= 30))).collect();
        let w = class_weights(&skewed, &set).unwrap();
        assert!((w[0] - 40.0 / 60.0).abs() < 1e-15);
        assert!((w[1] - 2.0).abs() < 1e-15);
        let one_class: Vec<_> = (0..4).map(|_| mk(0)).collect();
        match class_weights(&one_class, &set) {
            Err(CorpusError::EmptyClasses(c)) => assert_eq!(c, vec!["b".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_is_seeded_and_partitions() {
        let ds: Vec<Dialogue> = (0..50)
            .map(|i| Dialogue {
                id: format!("d{i}"),
                turns: vec![turn(Role::User, None)],
            })
            .collect();
        let a = split_dialogues(&ds, [8, 1, 1], 7);
        let b = split_dialogues(&ds, [8, 1, 1], 7);
        assert_eq!(a.train, b.train);
        assert_eq!((a.train.len(), a.dev.len(), a.test.len()), (40, 5, 5));
        let mut ids: Vec<_> = a
            .train
            .iter()
            .chain(&a.dev)
            .chain(&a.test)
            .map(|d| d.id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 50);
    }

    fn arb_dialogue() -> impl Strategy<Value = Dialogue> {
        prop::collection::vec((any::<bool>(), 0usize..8, "[a-z ]{0,12}"), 1..14).prop_map(
            |turns| Dialogue {
                id: "p".into(),
                turns: turns
                    .into_iter()
                    .map(|(agent, s, text)| Turn {
                        role: if agent { Role::Agent } else { Role::User },
                        text,
                        strategy: agent.then_some(s),
                    })
                    .collect(),
            },
        )
    }

    proptest! {
        #[test]
        fn windows_are_contiguous_suffixes(d in arb_dialogue(), window in 1usize..7) {
            let (samples, skipped) = window_samples(&d, window);
            let agents_with_history = d
                .turns
                .iter()
                .enumerate()
                .filter(|(i, t)| t.role == Role::Agent && *i > 0)
                .count();
            prop_assert_eq!(samples.len(), agents_with_history);
            prop_assert_eq!(samples.len() + skipped, d.turns.iter().filter(|t| t.role == Role::Agent).count());
            for s in &samples {
                let p = s.target_position;
                prop_assert!(!s.history.is_empty() && s.history.len() <= window);
                prop_assert_eq!(&s.history[..], &d.turns[p - s.history.len()..p]);
                prop_assert_eq!(s.history.len(), window.min(p));
                prop_assert!(s.target_strategy < 8);
                prop_assert_eq!(d.turns[p].role, Role::Agent);
            }
        }

        #[test]
        fn corpus_roundtrip_preserves_windows(d in arb_dialogue()) {
            let set = StrategySet::esconv();
            let f = tempfile::NamedTempFile::new().unwrap();
            write_corpus(f.path(), std::slice::from_ref(&d), &set).unwrap();
            let (back, _) = load_corpus(f.path(), Schema::Esconv, &set).unwrap();
            prop_assert_eq!(window_samples(&back[0], 5), window_samples(&d, 5));
        }
    }
}
