//! Data model shared by all five tasks, plus JSONL ingestion and validation.
//!
//! One record per line. Common fields are `id` and `task`. Document-grounded
//! tasks carry `document` (array of pre-segmented utterance strings),
//! `history` (array of `{question, answer}` turns, the current turn with no
//! answer) and `target`. NLI records carry `premise`, `hypothesis` and a
//! `target` drawn from the class set. An optional `split` label is kept for
//! statistics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NLI_CLASSES: [&str; 3] = ["entailment", "neutral", "contradiction"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cqa,
    Cqg,
    Kgc,
    Sum,
    Nli,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Cqa, Task::Cqg, Task::Kgc, Task::Sum, Task::Nli];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Cqa => "cqa",
            Task::Cqg => "cqg",
            Task::Kgc => "kgc",
            Task::Sum => "sum",
            Task::Nli => "nli",
        }
    }

    pub fn has_document(self) -> bool {
        self != Task::Nli
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cqa" => Ok(Task::Cqa),
            "cqg" => Ok(Task::Cqg),
            "kgc" => Ok(Task::Kgc),
            "sum" | "summarization" => Ok(Task::Sum),
            "nli" => Ok(Task::Nli),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub index: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Document {
    pub utterances: Vec<Utterance>,
}

impl Document {
    pub fn from_texts<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Document {
            utterances: texts
                .into_iter()
                .enumerate()
                .map(|(index, t)| Utterance {
                    index,
                    text: t.into(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.utterances.iter().map(|u| u.text.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueTurn {
    pub turn_index: usize,
    pub question: String,
    pub answer: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub task: Task,
    pub document: Option<Document>,
    pub history: Vec<DialogueTurn>,
    /// Gold response; for NLI the gold class token.
    pub target: String,
    pub nli_premise: Option<String>,
    pub nli_hypothesis: Option<String>,
    /// Optional split label (`train`, `dev`, `test_biased`, ...).
    pub split: Option<String>,
}

impl Sample {
    /// A document-grounded sample with a history of `(question, answer)` turns.
    pub fn grounded(
        id: impl Into<String>,
        task: Task,
        document: Document,
        history: Vec<(String, Option<String>)>,
        target: impl Into<String>,
    ) -> Self {
        Sample {
            id: id.into(),
            task,
            document: Some(document),
            history: history
                .into_iter()
                .enumerate()
                .map(|(turn_index, (question, answer))| DialogueTurn {
                    turn_index,
                    question,
                    answer,
                })
                .collect(),
            target: target.into(),
            nli_premise: None,
            nli_hypothesis: None,
            split: None,
        }
    }

    pub fn nli(
        id: impl Into<String>,
        premise: impl Into<String>,
        hypothesis: impl Into<String>,
        target: impl Into<String>,
    ) -> Self {
        Sample {
            id: id.into(),
            task: Task::Nli,
            document: None,
            history: Vec::new(),
            target: target.into(),
            nli_premise: Some(premise.into()),
            nli_hypothesis: Some(hypothesis.into()),
            split: None,
        }
    }

    /// The last turn that already carries an answer.
    pub fn anchor_turn(&self) -> Option<&DialogueTurn> {
        self.history.iter().rev().find(|t| t.answer.is_some())
    }

    /// Question of the unanswered final turn, if any.
    pub fn current_question(&self) -> Option<&str> {
        self.history
            .last()
            .filter(|t| t.answer.is_none())
            .map(|t| t.question.as_str())
    }

    /// Rendered task input `x`.
    pub fn input_text(&self) -> String {
        let mut out = String::new();
        if self.task == Task::Nli {
            out.push_str("Premise: ");
            out.push_str(self.nli_premise.as_deref().unwrap_or(""));
            out.push_str("\nHypothesis: ");
            out.push_str(self.nli_hypothesis.as_deref().unwrap_or(""));
            return out;
        }
        if let Some(doc) = &self.document {
            out.push_str("Document:");
            for u in &doc.utterances {
                out.push_str(&format!("\n[U{}] {}", u.index + 1, u.text));
            }
        }
        for turn in &self.history {
            out.push_str("\nQ: ");
            out.push_str(&turn.question);
            if let Some(a) = &turn.answer {
                out.push_str("\nA: ");
                out.push_str(a);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    MissingDocument,
    EmptyDocument,
    NonContiguousIndices,
    EmptyUtterance(usize),
    TurnOrder(usize),
    EmptyTarget,
    MissingPremise,
    MissingHypothesis,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingDocument => f.write_str("missing document"),
            Violation::EmptyDocument => f.write_str("document length ≥ 1"),
            Violation::NonContiguousIndices => f.write_str("utterance indices contiguous from 0"),
            Violation::EmptyUtterance(i) => write!(f, "utterance {i} text empty"),
            Violation::TurnOrder(i) => write!(f, "turn_index strictly increasing (turn {i})"),
            Violation::EmptyTarget => f.write_str("target non-empty"),
            Violation::MissingPremise => f.write_str("missing nli_premise"),
            Violation::MissingHypothesis => f.write_str("missing nli_hypothesis"),
        }
    }
}

/// Lists every invariant a sample breaks. An empty list means the sample is well formed.
pub fn validate_sample(sample: &Sample) -> Vec<Violation> {
    let mut out = Vec::new();
    if sample.target.trim().is_empty() {
        out.push(Violation::EmptyTarget);
    }
    if sample.task == Task::Nli {
        if sample.nli_premise.as_deref().map_or(true, |p| p.trim().is_empty()) {
            out.push(Violation::MissingPremise);
        }
        if sample.nli_hypothesis.as_deref().map_or(true, |h| h.trim().is_empty()) {
            out.push(Violation::MissingHypothesis);
        }
        return out;
    }
    match &sample.document {
        None => out.push(Violation::MissingDocument),
        Some(doc) if doc.is_empty() => out.push(Violation::EmptyDocument),
        Some(doc) => {
            if doc.utterances.iter().enumerate().any(|(i, u)| u.index != i) {
                out.push(Violation::NonContiguousIndices);
            }
            for u in &doc.utterances {
                if u.text.trim().is_empty() {
                    out.push(Violation::EmptyUtterance(u.index));
                }
            }
        }
    }
    for pair in sample.history.windows(2) {
        if pair[1].turn_index <= pair[0].turn_index {
            out.push(Violation::TurnOrder(pair[1].turn_index));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    task: Task,
    samples: Vec<Sample>,
}

impl Corpus {
    /// Builds a corpus, checking that every sample has `task` and ids are unique.
    pub fn new(task: Task, samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.task != task {
                return Err(Error::invalid(format!(
                    "sample {} has task {} but corpus task is {task}",
                    s.id, s.task
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Corpus { task, samples })
    }

    pub fn empty(task: Task) -> Self {
        Corpus {
            task,
            samples: Vec::new(),
        }
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    /// Copy with every sample's split label set to `label`.
    pub fn labeled(&self, label: &str) -> Corpus {
        Corpus {
            task: self.task,
            samples: self
                .samples
                .iter()
                .cloned()
                .map(|mut s| {
                    s.split = Some(label.to_string());
                    s
                })
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnRecord {
    question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    document: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    history: Vec<TurnRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    premise: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hypothesis: Option<String>,
    target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

impl From<&Sample> for SampleRecord {
    fn from(s: &Sample) -> Self {
        SampleRecord {
            id: s.id.clone(),
            task: s.task,
            document: s
                .document
                .as_ref()
                .map(|d| d.texts().map(str::to_string).collect()),
            history: s
                .history
                .iter()
                .map(|t| TurnRecord {
                    question: t.question.clone(),
                    answer: t.answer.clone(),
                })
                .collect(),
            premise: s.nli_premise.clone(),
            hypothesis: s.nli_hypothesis.clone(),
            target: s.target.clone(),
            split: s.split.clone(),
        }
    }
}

impl From<SampleRecord> for Sample {
    fn from(r: SampleRecord) -> Self {
        Sample {
            id: r.id,
            task: r.task,
            document: r.document.map(Document::from_texts),
            history: r
                .history
                .into_iter()
                .enumerate()
                .map(|(turn_index, t)| DialogueTurn {
                    turn_index,
                    question: t.question,
                    answer: t.answer,
                })
                .collect(),
            target: r.target,
            nli_premise: r.premise,
            nli_hypothesis: r.hypothesis,
            split: r.split,
        }
    }
}

impl Sample {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&SampleRecord::from(self)).expect("sample records always serialize")
    }

    pub fn from_json_line(line: &str) -> std::result::Result<Sample, serde_json::Error> {
        serde_json::from_str::<SampleRecord>(line).map(Sample::from)
    }
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Allowed NLI targets (QNLI uses a two-class set).
    pub nli_classes: Vec<String>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            nli_classes: DEFAULT_NLI_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub fn load_corpus(path: impl AsRef<Path>, task: Task) -> Result<Corpus> {
    load_corpus_with(path, task, &LoadOptions::default())
}

pub fn load_corpus_with(path: impl AsRef<Path>, task: Task, opts: &LoadOptions) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (i, raw) in reader.split(b'\n').enumerate() {
        let line_no = i + 1;
        let raw = raw.map_err(|e| Error::io(path, e))?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let line = String::from_utf8(raw).map_err(|e| parse_err(format!("invalid UTF-8: {e}")))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let sample = Sample::from_json_line(line).map_err(|e| parse_err(e.to_string()))?;
        if sample.task != task {
            return Err(parse_err(format!(
                "task mismatch: record has {} but {task} was requested",
                sample.task
            )));
        }
        let violations = validate_sample(&sample);
        if !violations.is_empty() {
            let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(parse_err(msgs.join("; ")));
        }
        if task == Task::Nli && !opts.nli_classes.iter().any(|c| c == &sample.target) {
            return Err(parse_err(format!(
                "target {:?} not in class set {:?}",
                sample.target, opts.nli_classes
            )));
        }
        if !ids.insert(sample.id.clone()) {
            return Err(parse_err(format!("duplicate id {}", sample.id)));
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    Ok(Corpus { task, samples })
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    write_samples(path, corpus.samples())
}

pub fn write_samples<'a>(
    path: impl AsRef<Path>,
    samples: impl IntoIterator<Item = &'a Sample>,
) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        writeln!(w, "{}", s.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub total: usize,
    pub by_label: BTreeMap<String, usize>,
    pub by_task: BTreeMap<Task, usize>,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut stats = CorpusStats {
        total: corpus.len(),
        ..Default::default()
    };
    for s in corpus.samples() {
        let label = s.split.clone().unwrap_or_else(|| "unlabeled".to_string());
        *stats.by_label.entry(label).or_default() += 1;
        *stats.by_task.entry(s.task).or_default() += 1;
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cqa(id: &str) -> Sample {
        Sample::grounded(
            id,
            Task::Cqa,
            Document::from_texts(["alpha beta", "gamma delta"]),
            vec![
                ("who?".into(), Some("alpha beta".into())),
                ("what else?".into(), None),
            ],
            "gamma delta",
        )
    }

    #[test]
    fn well_formed_nli_has_no_violations() {
        let s = Sample::nli("n1", "a man sleeps", "a man is awake", "contradiction");
        assert!(validate_sample(&s).is_empty());
    }

    #[test]
    fn nli_missing_hypothesis() {
        let mut s = Sample::nli("n1", "a man sleeps", "x", "neutral");
        s.nli_hypothesis = None;
        let v = validate_sample(&s);
        assert_eq!(v, vec![Violation::MissingHypothesis]);
        assert_eq!(v[0].to_string(), "missing nli_hypothesis");
    }

    #[test]
    fn cqa_empty_document() {
        let mut s = cqa("c1");
        s.document = Some(Document::default());
        let v = validate_sample(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "document length ≥ 1");
    }

    #[test]
    fn turn_order_and_indices() {
        let mut s = cqa("c1");
        s.history[1].turn_index = 0;
        s.document.as_mut().unwrap().utterances[1].index = 5;
        let v = validate_sample(&s);
        assert!(v.contains(&Violation::TurnOrder(0)));
        assert!(v.contains(&Violation::NonContiguousIndices));
    }

    #[test]
    fn corpus_rejects_mixed_tasks_and_duplicates() {
        let nli = Sample::nli("x", "p", "h", "neutral");
        assert!(Corpus::new(Task::Cqa, vec![cqa("a"), nli]).is_err());
        assert!(Corpus::new(Task::Cqa, vec![cqa("a"), cqa("a")]).is_err());
    }

    #[test]
    fn stats_unlabeled_and_labeled() {
        let c = Corpus::new(Task::Cqa, (0..10).map(|i| cqa(&i.to_string())).collect()).unwrap();
        let st = corpus_stats(&c);
        assert_eq!(st.by_label.get("unlabeled"), Some(&10));
        assert_eq!(st.total, 10);

        let samples = (0..10)
            .map(|i| {
                let mut s = cqa(&i.to_string());
                s.split = Some(if i < 7 { "biased" } else { "non_biased" }.into());
                s
            })
            .collect();
        let st = corpus_stats(&Corpus::new(Task::Cqa, samples).unwrap());
        assert_eq!(st.by_label.get("biased"), Some(&7));
        assert_eq!(st.by_label.get("non_biased"), Some(&3));
        assert_eq!(st.by_label.values().sum::<usize>(), 10);
    }

    #[test]
    fn current_question_and_anchor() {
        let s = cqa("c");
        assert_eq!(s.current_question(), Some("what else?"));
        assert_eq!(s.anchor_turn().unwrap().answer.as_deref(), Some("alpha beta"));
        assert!(s.input_text().contains("[U2] gamma delta"));
    }
}
