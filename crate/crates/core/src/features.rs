//! External per-window features: emotion logits for user turns, discourse
//! edges between history turns, and a context embedding.
//!
//! Two providers produce identical [`FeatureBundle`]s: [`FileProvider`]
//! reads precomputed records, [`FallbackProvider`] derives them from the text
//! with fixed deterministic rules.

use std::collections::HashMap;
use std::fs::File;
use std::hash::Hasher;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Role, WindowSample};

pub const EMOTIONS: [&str; 7] = [
    "Anger", "Disgust", "Fear", "Joy", "Sadness", "Surprise", "Neutral",
];
pub const NEUTRAL: usize = 6;

/// The 16 STAC discourse relations.
pub const RELATIONS: [&str; 16] = [
    "Comment",
    "Clarification Question",
    "Elaboration",
    "Acknowledgment",
    "Continuation",
    "Explanation",
    "Conditional",
    "Question-Answer Pair",
    "Alternation",
    "Question-Elaboration",
    "Result",
    "Background",
    "Narration",
    "Correction",
    "Parallel",
    "Contrast",
];
pub const CONTINUATION: usize = 4;

pub const FEATURE_FILE_VERSION: u32 = 1;
pub const DEFAULT_FALLBACK_DIM: usize = 256;

pub fn relation_index(name: &str) -> Option<usize> {
    RELATIONS.iter().position(|r| *r == name)
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("no feature record for ({0}, {1})")]
    Missing(String, usize),
    #[error("({0}, {1}): {2}")]
    Invalid(String, usize, String),
    #[error("header: {0}")]
    Header(String),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionLogits {
    pub turn_index: usize,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DiscourseEdge {
    pub src: usize,
    pub dst: usize,
    /// Index into [`RELATIONS`].
    pub relation: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub dialogue_id: String,
    pub target_position: usize,
    /// One entry per user turn, ordered by `turn_index`.
    pub emotions: Vec<EmotionLogits>,
    pub discourse: Vec<DiscourseEdge>,
    pub context: Vec<f64>,
}

impl FeatureBundle {
    pub fn emotion_for(&self, turn: usize) -> Option<&EmotionLogits> {
        self.emotions.iter().find(|e| e.turn_index == turn)
    }

    /// Check every bundle invariant against its sample.
    pub fn validate(&self, sample: &WindowSample, d_ctx: usize) -> Result<()> {
        let err = |m: String| {
            Err(FeatureError::Invalid(
                sample.dialogue_id.clone(),
                sample.target_position,
                m,
            ))
        };
        if self.dialogue_id != sample.dialogue_id || self.target_position != sample.target_position
        {
            return err(format!(
                "bundle belongs to ({}, {})",
                self.dialogue_id, self.target_position
            ));
        }
        let users: Vec<usize> = sample.user_turns().collect();
        let mut have: Vec<usize> = self.emotions.iter().map(|e| e.turn_index).collect();
        have.sort_unstable();
        if have != users {
            return err(format!(
                "emotion turns {have:?} do not match user turns {users:?}"
            ));
        }
        for e in &self.emotions {
            if e.z.len() != EMOTIONS.len() {
                return err(format!(
                    "turn {}: expected {} emotion logits, got {}",
                    e.turn_index,
                    EMOTIONS.len(),
                    e.z.len()
                ));
            }
            if e.z.iter().any(|v| !v.is_finite()) {
                return err(format!("turn {}: non-finite emotion logit", e.turn_index));
            }
        }
        let n = sample.history.len();
        for d in &self.discourse {
            if d.src == d.dst || d.src >= n || d.dst >= n || d.relation >= RELATIONS.len() {
                return err(format!(
                    "bad discourse edge {}->{} ({})",
                    d.src, d.dst, d.relation
                ));
            }
        }
        if self.context.len() != d_ctx {
            return err(format!(
                "context dimension {} != {}",
                self.context.len(),
                d_ctx
            ));
        }
        if self.context.iter().any(|v| !v.is_finite()) {
            return err("non-finite context value".into());
        }
        Ok(())
    }
}

/// Source of features for a window sample.
pub trait FeatureProvider: Send + Sync {
    fn provide(&self, sample: &WindowSample) -> Result<FeatureBundle>;

    /// Width of the context embedding.
    fn d_ctx(&self) -> usize;
}

// Lexicon entries are lowercase whole words.
const LEXICON: [&[&str]; 6] = [
    // Anger
    &[
        "angry", "anger", "furious", "mad", "annoyed", "irritated", "rage", "hate", "frustrated",
        "frustrating", "outraged", "resent",
    ],
    // Disgust
    &[
        "disgust", "disgusted", "disgusting", "gross", "sick", "revolting", "nasty", "awful",
        "repulsive",
    ],
    // Fear
    &[
        "afraid", "scared", "fear", "anxious", "anxiety", "worried", "worry", "nervous", "panic",
        "terrified", "frightened", "stress", "stressed",
    ],
    // Joy
    &[
        "happy", "glad", "joy", "great", "good", "love", "excited", "wonderful", "thanks",
        "thank", "relieved", "better", "grateful",
    ],
    // Sadness
    &[
        "sad", "depressed", "depression", "lonely", "alone", "cry", "crying", "unhappy", "hurt",
        "miss", "lost", "down", "hopeless", "grief",
    ],
    // Surprise
    &[
        "surprised", "surprise", "shocked", "unexpected", "wow", "amazed", "suddenly",
        "astonished",
    ],
];

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// Keyword-vote emotion logits.
///
/// Each of the six non-neutral emotions scores the number of its lexicon
/// words in `text`; Neutral scores `1 + max(0, 3 - total votes)`.
pub fn fallback_emotion(text: &str) -> Vec<f64> {
    let mut z = vec![0.0; EMOTIONS.len()];
    let mut total = 0usize;
    for w in words(text) {
        for (e, lex) in LEXICON.iter().enumerate() {
            if lex.contains(&w.as_str()) {
                z[e] += 1.0;
                total += 1;
            }
        }
    }
    z[NEUTRAL] = 1.0 + 3usize.saturating_sub(total) as f64;
    z
}

fn signed_bucket(feature: &str, d: usize) -> (usize, f64) {
    let mut h = FnvHasher::default();
    h.write(feature.as_bytes());
    let v = h.finish();
    let sign = if v >> 63 == 0 { 1.0 } else { -1.0 };
    ((v % d as u64) as usize, sign)
}

/// Hashed bag of role-tagged word uni- and bigrams, L2-normalized.
///
/// Every n-gram is prefixed with its turn's role tag, so the same words
/// spoken by a different role hash to different features. A window whose
/// texts are all empty produces the zero vector.
pub fn fallback_context(sample: &WindowSample, d_ctx: usize) -> Vec<f64> {
    let d = d_ctx.max(1);
    let mut v = vec![0.0; d];
    for turn in &sample.history {
        let tag = turn.role.tag();
        let ws: Vec<String> = words(&turn.text).collect();
        for w in &ws {
            let (b, s) = signed_bucket(&format!("[{tag}] {w}"), d);
            v[b] += s;
        }
        for pair in ws.windows(2) {
            let (b, s) = signed_bucket(&format!("[{tag}] {} {}", pair[0], pair[1]), d);
            v[b] += s;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Chain every consecutive history pair with a Continuation edge.
pub fn sequential_edges(n_turns: usize) -> Vec<DiscourseEdge> {
    (1..n_turns)
        .map(|i| DiscourseEdge {
            src: i - 1,
            dst: i,
            relation: CONTINUATION,
        })
        .collect()
}

/// Text-only provider requiring no precomputed data.
#[derive(Clone, Debug)]
pub struct FallbackProvider {
    pub d_ctx: usize,
}

impl Default for FallbackProvider {
    fn default() -> Self {
        Self {
            d_ctx: DEFAULT_FALLBACK_DIM,
        }
    }
}

impl FallbackProvider {
    pub fn new(d_ctx: usize) -> Self {
        Self { d_ctx: d_ctx.max(1) }
    }
}

impl FeatureProvider for FallbackProvider {
    fn provide(&self, sample: &WindowSample) -> Result<FeatureBundle> {
        let emotions = sample
            .history
            .iter()
            .enumerate()
            .filter(|(_, t)| t.role == Role::User)
            .map(|(i, t)| EmotionLogits {
                turn_index: i,
                z: fallback_emotion(&t.text),
            })
            .collect();
        Ok(FeatureBundle {
            dialogue_id: sample.dialogue_id.clone(),
            target_position: sample.target_position,
            emotions,
            discourse: sequential_edges(sample.history.len()),
            context: fallback_context(sample, self.d_ctx),
        })
    }

    fn d_ctx(&self) -> usize {
        self.d_ctx
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub version: u32,
    pub d_ctx: usize,
    pub emotion_labels: Vec<String>,
    pub relation_labels: Vec<String>,
}

impl FeatureHeader {
    pub fn new(d_ctx: usize) -> Self {
        Self {
            version: FEATURE_FILE_VERSION,
            d_ctx,
            emotion_labels: EMOTIONS.iter().map(|s| s.to_string()).collect(),
            relation_labels: RELATIONS.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.version != FEATURE_FILE_VERSION {
            return Err(FeatureError::Header(format!(
                "unsupported version {}",
                self.version
            )));
        }
        if self.d_ctx == 0 {
            return Err(FeatureError::Header("d_ctx must be positive".into()));
        }
        let expected: Vec<&str> = EMOTIONS.to_vec();
        if self.emotion_labels.iter().map(String::as_str).ne(expected) {
            return Err(FeatureError::Header(format!(
                "emotion labels {:?} differ from {:?}",
                self.emotion_labels, EMOTIONS
            )));
        }
        if let Some(bad) = self
            .relation_labels
            .iter()
            .find(|r| relation_index(r).is_none())
        {
            return Err(FeatureError::Header(format!(
                "unknown discourse relation {bad:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: String,
}

/// One line of a feature file after the header.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub dialogue_id: String,
    pub target_position: usize,
    pub emotions: Vec<EmotionLogits>,
    pub discourse: Vec<RawEdge>,
    pub context: Vec<f64>,
}

impl FeatureRecord {
    pub fn from_bundle(b: &FeatureBundle) -> Self {
        Self {
            dialogue_id: b.dialogue_id.clone(),
            target_position: b.target_position,
            emotions: b.emotions.clone(),
            discourse: b
                .discourse
                .iter()
                .map(|e| RawEdge {
                    src: e.src,
                    dst: e.dst,
                    relation: RELATIONS[e.relation].to_string(),
                })
                .collect(),
            context: b.context.clone(),
        }
    }

    fn into_bundle(self) -> std::result::Result<FeatureBundle, String> {
        let discourse = self
            .discourse
            .into_iter()
            .map(|e| {
                relation_index(&e.relation)
                    .map(|relation| DiscourseEdge {
                        src: e.src,
                        dst: e.dst,
                        relation,
                    })
                    .ok_or_else(|| format!("unknown discourse relation {:?}", e.relation))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut emotions = self.emotions;
        emotions.sort_by_key(|e| e.turn_index);
        Ok(FeatureBundle {
            dialogue_id: self.dialogue_id,
            target_position: self.target_position,
            emotions,
            discourse,
            context: self.context,
        })
    }
}

/// Provider backed by a feature file loaded fully into memory.
#[derive(Clone, Debug)]
pub struct FileProvider {
    header: FeatureHeader,
    records: HashMap<(String, usize), FeatureBundle>,
}

impl FileProvider {
    pub fn load(path: &Path) -> Result<Self> {
        let io = |source| FeatureError::Io {
            path: path.to_path_buf(),
            source,
        };
        let parse = |line: usize, msg: String| FeatureError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let reader = BufReader::new(File::open(path).map_err(io)?);
        let mut lines = reader.lines().enumerate();
        let header: FeatureHeader = loop {
            match lines.next() {
                Some((i, l)) => {
                    let l = l.map_err(io)?;
                    if l.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&l).map_err(|e| parse(i + 1, e.to_string()))?;
                }
                None => return Err(FeatureError::Header("empty feature file".into())),
            }
        };
        header.check()?;
        let mut records = HashMap::new();
        for (i, l) in lines {
            let l = l.map_err(io)?;
            if l.trim().is_empty() {
                continue;
            }
            let rec: FeatureRecord =
                serde_json::from_str(&l).map_err(|e| parse(i + 1, e.to_string()))?;
            let bundle = rec.into_bundle().map_err(|m| parse(i + 1, m))?;
            if bundle.context.len() != header.d_ctx {
                return Err(parse(
                    i + 1,
                    format!(
                        "context dimension {} != header d_ctx {}",
                        bundle.context.len(),
                        header.d_ctx
                    ),
                ));
            }
            records.insert(
                (bundle.dialogue_id.clone(), bundle.target_position),
                bundle,
            );
        }
        Ok(Self { header, records })
    }

    pub fn header(&self) -> &FeatureHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl FeatureProvider for FileProvider {
    fn provide(&self, sample: &WindowSample) -> Result<FeatureBundle> {
        let bundle = self
            .records
            .get(&(sample.dialogue_id.clone(), sample.target_position))
            .ok_or_else(|| {
                FeatureError::Missing(sample.dialogue_id.clone(), sample.target_position)
            })?;
        bundle.validate(sample, self.header.d_ctx)?;
        Ok(bundle.clone())
    }

    fn d_ctx(&self) -> usize {
        self.header.d_ctx
    }
}

/// Write a feature file for `bundles` with the given header.
pub fn write_feature_file(
    path: &Path,
    header: &FeatureHeader,
    bundles: &[FeatureBundle],
) -> Result<()> {
    let io = |source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(File::create(path).map_err(io)?);
    writeln!(f, "{}", serde_json::to_string(header).expect("header")).map_err(io)?;
    for b in bundles {
        let rec = FeatureRecord::from_bundle(b);
        writeln!(f, "{}", serde_json::to_string(&rec).expect("record")).map_err(io)?;
    }
    f.flush().map_err(io)
}
