//! Tasks, spans and edge-probing records.
//!
//! Records are JSON lines:
//!
//! ```text
//! {"text": "Mary goes to the market", "targets": [{"span1": [0, 1], "label": "1"}]}
//! ```
//!
//! Spans are half-open word indices. `label` may be a string or an array of
//! strings; `span2` is present only for two-span tasks; `info` is carried
//! through untouched.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Half-open word span `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpanIndex {
    pub start: usize,
    pub end: usize,
}

impl SpanIndex {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::Data(format!(
                "empty or reversed span [{start},{end})"
            )));
        }
        Ok(SpanIndex { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn within(&self, word_count: usize) -> bool {
        self.start < self.end && self.end <= word_count
    }
}

impl fmt::Display for SpanIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.start, self.end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arity {
    OneSpan,
    TwoSpan,
}

impl Arity {
    pub fn span_count(self) -> usize {
        match self {
            Arity::OneSpan => 1,
            Arity::TwoSpan => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbingTarget {
    pub span1: SpanIndex,
    pub span2: Option<SpanIndex>,
    pub labels: BTreeSet<String>,
}

impl ProbingTarget {
    pub fn single(span: SpanIndex, label: &str) -> Self {
        ProbingTarget {
            span1: span,
            span2: None,
            labels: BTreeSet::from([label.to_string()]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbingExample {
    pub words: Vec<String>,
    pub targets: Vec<ProbingTarget>,
    pub info: Map<String, Value>,
}

impl ProbingExample {
    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    /// Store key of this sentence: `info.sentence_id` when present, else `fallback`.
    pub fn sentence_id(&self, fallback: usize) -> u64 {
        self.info
            .get("sentence_id")
            .and_then(Value::as_u64)
            .unwrap_or(fallback as u64)
    }
}

/// The probing tasks this toolkit knows about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    ConstituentLabeling,
    ConstituentDetection,
    Nel,
    Srl,
    MentionDetection,
    Coref,
    Synthetic,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::ConstituentLabeling,
        TaskKind::ConstituentDetection,
        TaskKind::Nel,
        TaskKind::Srl,
        TaskKind::MentionDetection,
        TaskKind::Coref,
        TaskKind::Synthetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ConstituentLabeling => "constituent-labeling",
            TaskKind::ConstituentDetection => "constituent-detection",
            TaskKind::Nel => "nel",
            TaskKind::Srl => "srl",
            TaskKind::MentionDetection => "mention-detection",
            TaskKind::Coref => "coref",
            TaskKind::Synthetic => "synthetic",
        }
    }

    pub fn arity(self) -> Arity {
        match self {
            TaskKind::Srl | TaskKind::Coref => Arity::TwoSpan,
            _ => Arity::OneSpan,
        }
    }

    /// SRL projects predicate and argument spans with separate matrices.
    pub fn separate_projections(self) -> bool {
        self == TaskKind::Srl
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub arity: Arity,
    pub labels: Vec<String>,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, arity: Arity, labels: Vec<String>) -> Result<Self> {
        let unique: BTreeSet<&String> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(Error::Data("label vocabulary contains duplicates".into()));
        }
        if labels.is_empty() {
            return Err(Error::Data("label vocabulary is empty".into()));
        }
        Ok(TaskSpec {
            name: name.into(),
            arity,
            labels,
        })
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Gold indicator vector of a target over this vocabulary.
    pub fn encode(&self, target: &ProbingTarget) -> Result<Vec<bool>> {
        let mut y = vec![false; self.labels.len()];
        for label in &target.labels {
            let idx = self
                .label_index(label)
                .ok_or_else(|| Error::Data(format!("label {label:?} not in task vocabulary")))?;
            y[idx] = true;
        }
        Ok(y)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawLabel {
    One(String),
    Many(Vec<String>),
}

#[derive(Serialize, Deserialize)]
struct RawTarget {
    span1: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    span2: Option<[usize; 2]>,
    label: RawLabel,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    text: String,
    targets: Vec<RawTarget>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    info: Map<String, Value>,
}

fn check_span(raw: [usize; 2], words: usize) -> std::result::Result<SpanIndex, String> {
    let span = SpanIndex {
        start: raw[0],
        end: raw[1],
    };
    if !span.within(words) {
        return Err(format!("span out of bounds: {span} on {words} words"));
    }
    Ok(span)
}

fn convert(raw: RawRecord, arity: Option<Arity>) -> std::result::Result<ProbingExample, String> {
    let words: Vec<String> = raw.text.split_whitespace().map(str::to_string).collect();
    if words.is_empty() {
        return Err("record has no words".into());
    }
    let mut targets = Vec::with_capacity(raw.targets.len());
    for t in raw.targets {
        let span1 = check_span(t.span1, words.len())?;
        let span2 = t.span2.map(|s| check_span(s, words.len())).transpose()?;
        match (arity, span2.is_some()) {
            (Some(Arity::OneSpan), true) => return Err("two-span target in one-span task".into()),
            (Some(Arity::TwoSpan), false) => return Err("missing span2 in two-span task".into()),
            _ => {}
        }
        let labels: BTreeSet<String> = match t.label {
            RawLabel::One(l) => BTreeSet::from([l]),
            RawLabel::Many(ls) => ls.into_iter().collect(),
        };
        if labels.is_empty() {
            return Err("target has no labels".into());
        }
        targets.push(ProbingTarget {
            span1,
            span2,
            labels,
        });
    }
    Ok(ProbingExample {
        words,
        targets,
        info: raw.info,
    })
}

/// Reads one record per non-empty line. `arity`, when given, is enforced on every target.
pub fn parse_examples<R: BufRead>(reader: R, arity: Option<Arity>) -> Result<Vec<ProbingExample>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: lineno,
            message: format!("malformed record: {e}"),
        })?;
        let example = convert(raw, arity).map_err(|message| Error::Record {
            line: lineno,
            message,
        })?;
        out.push(example);
    }
    Ok(out)
}

pub fn read_examples(path: &std::path::Path, arity: Option<Arity>) -> Result<Vec<ProbingExample>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_examples(std::io::BufReader::new(file), arity)
}

fn to_raw(example: &ProbingExample) -> RawRecord {
    RawRecord {
        text: example.words.join(" "),
        targets: example
            .targets
            .iter()
            .map(|t| RawTarget {
                span1: [t.span1.start, t.span1.end],
                span2: t.span2.map(|s| [s.start, s.end]),
                label: if t.labels.len() == 1 {
                    RawLabel::One(t.labels.iter().next().cloned().unwrap_or_default())
                } else {
                    RawLabel::Many(t.labels.iter().cloned().collect())
                },
            })
            .collect(),
        info: example.info.clone(),
    }
}

pub fn write_examples<W: Write>(mut writer: W, examples: &[ProbingExample]) -> Result<()> {
    for example in examples {
        let line =
            serde_json::to_string(&to_raw(example)).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(writer, "{line}")?;
    }
    writer.flush()?;
    Ok(())
}

/// Sorted, duplicate-free label list over every target of the corpus.
pub fn build_label_vocab(examples: &[ProbingExample]) -> Result<Vec<String>> {
    let labels: BTreeSet<&String> = examples
        .iter()
        .flat_map(|e| e.targets.iter())
        .flat_map(|t| t.labels.iter())
        .collect();
    if labels.is_empty() {
        return Err(Error::Data("corpus has no targets".into()));
    }
    Ok(labels.into_iter().cloned().collect())
}
