use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Completion request as sent over the wire. With `echo_score` set the backend
/// scores that continuation instead of sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub seed: u64,
    pub logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo_score: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
}

pub trait Backend: Sync {
    fn id(&self) -> String;

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn id(&self) -> String {
        (**self).id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        (**self).complete(request)
    }
}

impl<B: Backend + ?Sized + Send> Backend for Box<B> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        (**self).complete(request)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<f64>,
    pub backend_id: String,
}

impl GenerationResult {
    pub fn from_response(resp: CompletionResponse, backend_id: String) -> Result<Self> {
        let token_logprobs = resp.token_logprobs.ok_or(Error::MissingLogprobs)?;
        if token_logprobs.len() != resp.tokens.len() {
            return Err(Error::Backend(format!(
                "{} tokens but {} logprobs",
                resp.tokens.len(),
                token_logprobs.len()
            )));
        }
        if let Some(bad) = token_logprobs.iter().find(|lp| !lp.is_finite() || **lp > 0.0) {
            return Err(Error::Backend(format!("invalid token logprob {bad}")));
        }
        Ok(GenerationResult {
            text: resp.text,
            tokens: resp.tokens,
            token_logprobs,
            backend_id,
        })
    }

    pub fn min_token_prob(&self) -> Option<f64> {
        self.token_logprobs
            .iter()
            .copied()
            .reduce(f64::min)
            .map(f64::exp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerateOptions {
    pub max_tokens: u32,
    /// Upper bound on in-flight requests.
    pub concurrency: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            max_tokens: 64,
            concurrency: 4,
        }
    }
}

pub const DEFAULT_N_PER_PROMPT: usize = 3;

/// Seed for the `k`-th draw of a prompt.
pub fn draw_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_add(k as u64)
}

/// `n_per_prompt` results per prompt, grouped in prompt order.
pub fn generate<B: Backend + ?Sized>(
    prompts: &[String],
    backend: &B,
    n_per_prompt: usize,
    seed: u64,
    opts: GenerateOptions,
) -> Result<Vec<GenerationResult>> {
    if n_per_prompt == 0 {
        return Err(Error::invalid("n_per_prompt must be at least 1"));
    }
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|i| (0..n_per_prompt).map(move |k| (i, k)))
        .collect();
    let backend_id = backend.id();
    let results = crate::par::bounded_map(&jobs, opts.concurrency, |&(i, k)| {
        let req = CompletionRequest {
            prompt: prompts[i].clone(),
            max_tokens: opts.max_tokens,
            seed: draw_seed(seed, k),
            logprobs: true,
            echo_score: None,
        };
        backend
            .complete(&req)
            .map_err(|e| match e {
                Error::Transport { message, .. } => Error::Transport {
                    prompt_index: i,
                    message,
                },
                other => other,
            })
            .and_then(|resp| GenerationResult::from_response(resp, backend_id.clone()))
    });
    results.into_iter().collect()
}

/// Log-probability of `continuation` given `prompt`, summed over its tokens.
pub fn score_continuation<B: Backend + ?Sized>(backend: &B, prompt: &str, continuation: &str) -> Result<f64> {
    let req = CompletionRequest {
        prompt: prompt.to_string(),
        max_tokens: 0,
        seed: 0,
        logprobs: true,
        echo_score: Some(continuation.to_string()),
    };
    let resp = backend.complete(&req)?;
    let lps = resp.token_logprobs.ok_or(Error::MissingLogprobs)?;
    if lps.is_empty() {
        return Err(Error::Backend(format!("backend returned no scores for {continuation:?}")));
    }
    let total: f64 = lps.iter().sum();
    if total.is_nan() {
        return Err(Error::Backend("NaN continuation score".into()));
    }
    Ok(total)
}
