use std::time::Duration;

use super::backend::{Backend, CompletionRequest, CompletionResponse};
use crate::error::{Error, Result};

pub const BACKEND_URL_ENV: &str = "POSDEBIAS_BACKEND_URL";

/// Client for a completion endpoint that accepts a JSON [`CompletionRequest`]
/// via POST and answers with a JSON [`CompletionResponse`].
#[derive(Clone, Debug)]
pub struct HttpBackend {
    url: String,
    agent: ureq::Agent,
    retries: u32,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>) -> Self {
        HttpBackend {
            url: url.into(),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(60))
                .build(),
            retries: 0,
        }
    }

    /// Resolves the endpoint from the environment, falling back to `configured`.
    pub fn from_env_or(configured: Option<&str>) -> Option<Self> {
        std::env::var(BACKEND_URL_ENV)
            .ok()
            .filter(|u| !u.trim().is_empty())
            .or_else(|| configured.map(str::to_string))
            .map(Self::new)
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.agent = ureq::AgentBuilder::new().timeout(timeout).build();
        self
    }

    /// Extra attempts after a transport failure or 5xx response.
    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn attempt(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        let resp = self.agent.post(&self.url).send_json(request);
        match resp {
            Ok(r) => r.into_json::<CompletionResponse>().map_err(|e| {
                Error::Backend(format!("malformed response from {}: {e}", self.url))
            }),
            Err(ureq::Error::Status(code, r)) if code >= 500 => Err(Error::Transport {
                prompt_index: 0,
                message: format!("HTTP {code}: {}", r.into_string().unwrap_or_default()),
            }),
            Err(ureq::Error::Status(code, r)) => Err(Error::Backend(format!(
                "HTTP {code}: {}",
                r.into_string().unwrap_or_default()
            ))),
            Err(ureq::Error::Transport(t)) => Err(Error::Transport {
                prompt_index: 0,
                message: t.to_string(),
            }),
        }
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.url)
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        let mut last = None;
        for _ in 0..=self.retries {
            match self.attempt(request) {
                Err(e @ Error::Transport { .. }) => last = Some(e),
                other => return other,
            }
        }
        Err(last.expect("at least one attempt"))
    }
}
