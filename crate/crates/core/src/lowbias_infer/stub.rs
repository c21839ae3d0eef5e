//! Offline backends: echo, table lookup (record/replay) and a seeded Markov
//! sampler. All of them are pure functions of the request.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backend::{Backend, CompletionRequest, CompletionResponse};
use crate::error::{Error, Result};

/// Log-probability the echo stub assigns to tokens it has not seen in the prompt.
pub const ECHO_UNSEEN_LOGPROB: f64 = -9.210340371976182; // ln 1e-4

const ECHO_MARKER: &str = "copy:";

/// One request/response pair; a replay file is a JSONL list of these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub request: CompletionRequest,
    pub response: CompletionResponse,
}

pub fn read_exchanges(path: impl AsRef<Path>) -> Result<Vec<Exchange>> {
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

pub fn write_exchanges(path: impl AsRef<Path>, exchanges: &[Exchange]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in exchanges {
        writeln!(w, "{}", serde_json::to_string(ex)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Replay table. An exact request match wins; otherwise the entries recorded
/// for the same prompt (and scoring continuation) are indexed by `seed mod n`.
#[derive(Clone, Debug, Default)]
pub struct ReplayTable {
    exact: HashMap<String, CompletionResponse>,
    by_prompt: HashMap<(String, Option<String>), Vec<CompletionResponse>>,
}

impl ReplayTable {
    pub fn new(exchanges: impl IntoIterator<Item = Exchange>) -> Self {
        let mut t = ReplayTable::default();
        for ex in exchanges {
            t.insert(ex);
        }
        t
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(read_exchanges(path)?))
    }

    pub fn insert(&mut self, ex: Exchange) {
        let key = serde_json::to_string(&ex.request).expect("requests serialize");
        self.exact.insert(key, ex.response.clone());
        self.by_prompt
            .entry((ex.request.prompt, ex.request.echo_score))
            .or_default()
            .push(ex.response);
    }

    /// Registers `responses` for `prompt`, addressed by draw seed modulo their count.
    pub fn insert_responses(&mut self, prompt: &str, responses: Vec<CompletionResponse>) {
        self.by_prompt
            .entry((prompt.to_string(), None))
            .or_default()
            .extend(responses);
    }

    pub fn insert_score(&mut self, prompt: &str, continuation: &str, token_logprobs: Vec<f64>) {
        let tokens = continuation.split_whitespace().map(str::to_string).collect();
        self.by_prompt
            .entry((prompt.to_string(), Some(continuation.to_string())))
            .or_default()
            .push(CompletionResponse {
                text: continuation.to_string(),
                tokens,
                token_logprobs: Some(token_logprobs),
            });
    }

    pub fn lookup(&self, req: &CompletionRequest) -> Option<&CompletionResponse> {
        let key = serde_json::to_string(req).expect("requests serialize");
        if let Some(r) = self.exact.get(&key) {
            return Some(r);
        }
        let list = self
            .by_prompt
            .get(&(req.prompt.clone(), req.echo_score.clone()))?;
        list.get((req.seed % list.len() as u64) as usize)
    }

    pub fn len(&self) -> usize {
        self.by_prompt.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_prompt.is_empty()
    }

    /// Every registered entry as exchanges, sorted for stable output.
    pub fn to_exchanges(&self) -> Vec<Exchange> {
        let mut keys: Vec<_> = self.by_prompt.keys().collect();
        keys.sort();
        let mut out = Vec::new();
        for key in keys {
            for (seed, resp) in self.by_prompt[key].iter().enumerate() {
                out.push(Exchange {
                    request: CompletionRequest {
                        prompt: key.0.clone(),
                        max_tokens: if key.1.is_some() { 0 } else { 64 },
                        seed: seed as u64,
                        logprobs: true,
                        echo_score: key.1.clone(),
                    },
                    response: resp.clone(),
                });
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub enum StubMode {
    /// Returns the prompt text after the last `copy:` marker with logprob 0 per token.
    Echo,
    Table(ReplayTable),
    /// Seeded random walk over the prompt's own tokens.
    Markov { model_seed: u64 },
}

#[derive(Clone, Debug)]
pub struct StubBackend {
    mode: StubMode,
}

impl StubBackend {
    pub fn echo() -> Self {
        StubBackend { mode: StubMode::Echo }
    }

    pub fn table(table: ReplayTable) -> Self {
        StubBackend {
            mode: StubMode::Table(table),
        }
    }

    pub fn markov(model_seed: u64) -> Self {
        StubBackend {
            mode: StubMode::Markov { model_seed },
        }
    }

    pub fn mode(&self) -> &StubMode {
        &self.mode
    }
}

pub(crate) fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn split_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

fn truncate(mut tokens: Vec<String>, max_tokens: u32) -> Vec<String> {
    if max_tokens > 0 {
        tokens.truncate(max_tokens as usize);
    }
    tokens
}

impl Backend for StubBackend {
    fn id(&self) -> String {
        match &self.mode {
            StubMode::Echo => "stub:echo".into(),
            StubMode::Table(_) => "stub:table".into(),
            StubMode::Markov { model_seed } => format!("stub:markov:{model_seed}"),
        }
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse> {
        match &self.mode {
            StubMode::Echo => Ok(echo(req)),
            StubMode::Table(table) => table.lookup(req).cloned().ok_or_else(|| {
                Error::Backend(format!(
                    "no table entry for prompt {:?}{}",
                    preview(&req.prompt),
                    req.echo_score
                        .as_deref()
                        .map(|c| format!(" scoring {c:?}"))
                        .unwrap_or_default()
                ))
            }),
            StubMode::Markov { model_seed } => Ok(MarkovChain::new(*model_seed, &req.prompt).respond(req)),
        }
    }
}

fn preview(s: &str) -> String {
    let mut p: String = s.chars().take(40).collect();
    if p.len() < s.len() {
        p.push('…');
    }
    p
}

fn echo(req: &CompletionRequest) -> CompletionResponse {
    if let Some(cont) = &req.echo_score {
        let seen: Vec<&str> = req.prompt.split_whitespace().collect();
        let tokens = split_tokens(cont);
        let lps = tokens
            .iter()
            .map(|t| if seen.contains(&t.as_str()) { 0.0 } else { ECHO_UNSEEN_LOGPROB })
            .collect();
        return CompletionResponse {
            text: cont.clone(),
            tokens,
            token_logprobs: Some(lps),
        };
    }
    let tail = req
        .prompt
        .rfind(ECHO_MARKER)
        .map(|i| &req.prompt[i + ECHO_MARKER.len()..])
        .unwrap_or(&req.prompt);
    let tokens = truncate(split_tokens(tail), req.max_tokens);
    CompletionResponse {
        text: tokens.join(" "),
        token_logprobs: Some(vec![0.0; tokens.len()]),
        tokens,
    }
}

/// Transition weights are a fixed hash of `(model_seed, from, to)`, so the chain
/// is fully determined by the model seed and the prompt vocabulary.
struct MarkovChain {
    model_seed: u64,
    vocab: Vec<String>,
}

const MARKOV_FALLBACK_VOCAB: [&str; 6] = ["the", "a", "of", "what", "is", "it"];

impl MarkovChain {
    fn new(model_seed: u64, prompt: &str) -> Self {
        let mut vocab: Vec<String> = Vec::new();
        for t in prompt.split_whitespace() {
            if !vocab.iter().any(|v| v == t) {
                vocab.push(t.to_string());
            }
        }
        if vocab.is_empty() {
            vocab = MARKOV_FALLBACK_VOCAB.iter().map(|s| s.to_string()).collect();
        }
        MarkovChain { model_seed, vocab }
    }

    fn weight(&self, from: &str, to: &str) -> f64 {
        let h = stable_hash(&[&self.model_seed.to_le_bytes(), from.as_bytes(), to.as_bytes()]);
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        0.05 + u * u * u
    }

    fn probs(&self, from: &str) -> Vec<f64> {
        let w: Vec<f64> = self.vocab.iter().map(|t| self.weight(from, t)).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }

    fn logprob(&self, from: &str, to: &str) -> f64 {
        match self.vocab.iter().position(|v| v == to) {
            Some(j) => self.probs(from)[j].ln(),
            None => ECHO_UNSEEN_LOGPROB,
        }
    }

    fn respond(&self, req: &CompletionRequest) -> CompletionResponse {
        let start = "<s>";
        if let Some(cont) = &req.echo_score {
            let tokens = split_tokens(cont);
            let mut prev = start.to_string();
            let mut lps = Vec::with_capacity(tokens.len());
            for t in &tokens {
                lps.push(self.logprob(&prev, t));
                prev = t.clone();
            }
            return CompletionResponse {
                text: cont.clone(),
                tokens,
                token_logprobs: Some(lps),
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[
            req.prompt.as_bytes(),
            &req.seed.to_le_bytes(),
        ]));
        let cap = if req.max_tokens == 0 { 16 } else { req.max_tokens.min(16) } as usize;
        let len = rng.gen_range(1..=cap.max(1));
        let mut prev = start.to_string();
        let mut tokens = Vec::with_capacity(len);
        let mut lps = Vec::with_capacity(len);
        for _ in 0..len {
            let probs = self.probs(&prev);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (j, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = j;
                    break;
                }
            }
            lps.push(probs[pick].ln());
            prev = self.vocab[pick].clone();
            tokens.push(prev.clone());
        }
        CompletionResponse {
            text: tokens.join(" "),
            tokens,
            token_logprobs: Some(lps),
        }
    }
}

/// Wraps a backend and records every exchange for later replay.
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<Vec<Exchange>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Recorded exchanges ordered by prompt, continuation and seed.
    pub fn exchanges(&self) -> Vec<Exchange> {
        let mut log = self.log.lock().expect("recording lock").clone();
        log.sort_by(|a, b| {
            (&a.request.prompt, &a.request.echo_score, a.request.seed)
                .cmp(&(&b.request.prompt, &b.request.echo_score, b.request.seed))
        });
        log
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_exchanges(path, &self.exchanges())
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        let response = self.inner.complete(request)?;
        self.log.lock().expect("recording lock").push(Exchange {
            request: request.clone(),
            response: response.clone(),
        });
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(prompt: &str, seed: u64) -> CompletionRequest {
        CompletionRequest {
            prompt: prompt.into(),
            max_tokens: 16,
            seed,
            logprobs: true,
            echo_score: None,
        }
    }

    #[test]
    fn echo_copies_after_marker() {
        let r = StubBackend::echo().complete(&req("please copy: hello world", 0)).unwrap();
        assert_eq!(r.text, "hello world");
        assert_eq!(r.token_logprobs, Some(vec![0.0, 0.0]));
    }

    #[test]
    fn markov_is_deterministic_and_valid() {
        let b = StubBackend::markov(3);
        let a = b.complete(&req("the quick brown fox jumps", 9)).unwrap();
        assert_eq!(a, b.complete(&req("the quick brown fox jumps", 9)).unwrap());
        let lps = a.token_logprobs.unwrap();
        assert_eq!(lps.len(), a.tokens.len());
        assert!(lps.iter().all(|l| l.is_finite() && *l <= 0.0));
    }

    #[test]
    fn markov_probs_normalized() {
        let chain = MarkovChain::new(1, "a b c d");
        let s: f64 = chain.probs("a").iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn table_seed_indexing_and_miss() {
        let mut t = ReplayTable::default();
        let mk = |s: &str| CompletionResponse {
            text: s.into(),
            tokens: vec![s.into()],
            token_logprobs: Some(vec![-0.1]),
        };
        t.insert_responses("p", vec![mk("a"), mk("b")]);
        let b = StubBackend::table(t);
        assert_eq!(b.complete(&req("p", 0)).unwrap().text, "a");
        assert_eq!(b.complete(&req("p", 3)).unwrap().text, "b");
        assert!(b.complete(&req("q", 0)).is_err());
    }

    #[test]
    fn recording_replays_bit_exact() {
        let rec = RecordingBackend::new(StubBackend::markov(5));
        let r1 = rec.complete(&req("one two three", 1)).unwrap();
        let table = ReplayTable::new(rec.exchanges());
        let r2 = StubBackend::table(table).complete(&req("one two three", 1)).unwrap();
        assert_eq!(r1, r2);
    }
}
