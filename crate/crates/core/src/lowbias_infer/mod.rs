//! Prompt construction and unsupervised response collection.
//!
//! Responses come from any [`Backend`]: the HTTP client speaks a small
//! completion protocol, and [`StubBackend`] provides offline echo,
//! table-lookup and seeded Markov modes for tests and toy runs.

mod backend;
mod classes;
mod http;
mod prompt;
mod stub;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use backend::{
    draw_seed, generate, score_continuation, Backend, CompletionRequest, CompletionResponse,
    GenerateOptions, GenerationResult, DEFAULT_N_PER_PROMPT,
};
pub use classes::{nli_class_distribution, nli_class_distribution_for_prompt, ClassDistribution};
pub(crate) use classes::argmax;
pub use http::{HttpBackend, BACKEND_URL_ENV};
pub use prompt::{
    build_prompt, default_diverse_prompts, default_instruction, nli_prompt, select_icl_exemplars,
    PromptSpec, Strategy, DEFAULT_ICL_EXEMPLARS,
};
pub use stub::{
    read_exchanges, write_exchanges, Exchange, RecordingBackend, ReplayTable, StubBackend, StubMode,
    ECHO_UNSEEN_LOGPROB,
};

use crate::corpus::Sample;
use crate::error::{Error, Result};

/// Backend selector as written on the command line or in a config file:
/// `stub:echo`, `stub:markov[:SEED]`, `stub:table=PATH` or an `http(s)://` URL.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackendSpec {
    Echo,
    Markov(u64),
    Table(PathBuf),
    Http(String),
}

impl std::str::FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(BackendSpec::Http(s.to_string()));
        }
        if let Some(path) = s.strip_prefix("stub:table=") {
            return Ok(BackendSpec::Table(PathBuf::from(path)));
        }
        match s {
            "stub:echo" | "echo" => Ok(BackendSpec::Echo),
            "stub:markov" | "markov" => Ok(BackendSpec::Markov(0)),
            _ => s
                .strip_prefix("stub:markov:")
                .and_then(|n| n.parse().ok())
                .map(BackendSpec::Markov)
                .ok_or_else(|| Error::invalid(format!("unknown backend {s:?}"))),
        }
    }
}

impl TryFrom<String> for BackendSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BackendSpec> for String {
    fn from(b: BackendSpec) -> String {
        match b {
            BackendSpec::Echo => "stub:echo".into(),
            BackendSpec::Markov(seed) => format!("stub:markov:{seed}"),
            BackendSpec::Table(p) => format!("stub:table={}", p.display()),
            BackendSpec::Http(u) => u,
        }
    }
}

impl BackendSpec {
    /// Instantiates the backend. `POSDEBIAS_BACKEND_URL`, when set, replaces an
    /// HTTP endpoint from configuration.
    pub fn open(&self) -> Result<Box<dyn Backend + Send>> {
        Ok(match self {
            BackendSpec::Echo => Box::new(StubBackend::echo()),
            BackendSpec::Markov(seed) => Box::new(StubBackend::markov(*seed)),
            BackendSpec::Table(path) => Box::new(StubBackend::table(ReplayTable::load(path)?)),
            BackendSpec::Http(url) => Box::new(
                HttpBackend::from_env_or(Some(url)).expect("configured url present"),
            ),
        })
    }
}

/// One unsupervised response for a sample, as exchanged between `infer` and `align`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub sample_id: String,
    pub prompt_index: usize,
    pub target: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<f64>,
    pub backend_id: String,
}

impl CandidateRecord {
    pub fn new(sample: &Sample, prompt_index: usize, result: GenerationResult) -> Self {
        CandidateRecord {
            sample_id: sample.id.clone(),
            prompt_index,
            target: sample.target.clone(),
            text: result.text,
            tokens: result.tokens,
            token_logprobs: result.token_logprobs,
            backend_id: result.backend_id,
        }
    }

    pub fn generation(&self) -> GenerationResult {
        GenerationResult {
            text: self.text.clone(),
            tokens: self.tokens.clone(),
            token_logprobs: self.token_logprobs.clone(),
            backend_id: self.backend_id.clone(),
        }
    }
}

/// Builds prompts for every sample and collects `n_per_prompt` responses per prompt.
pub fn infer_corpus<B: Backend + ?Sized>(
    samples: &[Sample],
    spec: &PromptSpec,
    backend: &B,
    n_per_prompt: usize,
    seed: u64,
    opts: GenerateOptions,
) -> Result<Vec<CandidateRecord>> {
    let mut out = Vec::new();
    for sample in samples {
        let prompts = build_prompt(sample, spec)?;
        let results = generate(&prompts, backend, n_per_prompt, seed, opts)?;
        for (j, r) in results.into_iter().enumerate() {
            out.push(CandidateRecord::new(sample, j / n_per_prompt, r));
        }
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
