//! HTTP client for hosted generation endpoints.
//!
//! The wire contract is a single JSON POST: `{model, prompt, max_tokens,
//! temperature}` in, `{text}` out, with temperature pinned to zero because
//! every caller in this crate wants greedy decoding. Request building and
//! response parsing are pure functions so they can be tested without a
//! server; transport failures retry with backoff and surface the attempt
//! count.
//!
//! Credentials come from the environment and are never logged or embedded
//! in error messages.

use serde::{Deserialize, Serialize};
use std::time::Duration;

use super::{catalog_model, Backend, BackendError, Capabilities, Counters, ModelArch, ModelInfo};
use crate::prompting::EncodedInput;

/// Environment variable naming the endpoint URL.
pub const ENDPOINT_VAR: &str = "REDLINE_REMOTE_ENDPOINT";
/// Environment variable holding the optional bearer token.
pub const TOKEN_VAR: &str = "REDLINE_REMOTE_TOKEN";

/// JSON body sent to the endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: usize,
    /// Always zero: completions must be greedy and reproducible.
    pub temperature: f64,
}

/// JSON body returned by the endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
}

/// Builds the request body for one completion call.
pub fn build_request(model: &str, prompt: &str, max_new_tokens: usize) -> GenerationRequest {
    GenerationRequest {
        model: model.to_string(),
        prompt: prompt.to_string(),
        max_tokens: max_new_tokens,
        temperature: 0.0,
    }
}

/// Parses a response body, tolerating unknown extra fields.
pub fn parse_response(body: &str) -> Result<String, String> {
    serde_json::from_str::<GenerationResponse>(body)
        .map(|r| r.text)
        .map_err(|e| format!("bad response body: {e}"))
}

/// Generation-only backend backed by a hosted model.
pub struct RemoteBackend {
    info: ModelInfo,
    endpoint: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
    max_attempts: usize,
    backoff: Duration,
    counters: Counters,
}

impl RemoteBackend {
    /// Connects to `endpoint` for completions from `model`. Geometry comes
    /// from the model catalog when the name is known; unknown models are
    /// assumed to be plain decoders.
    pub fn new(model: &str, endpoint: &str, token: Option<String>) -> Self {
        let info = catalog_model(model).unwrap_or(ModelInfo {
            name: model.to_string(),
            hidden_dim: 4096,
            arch: ModelArch::DecoderOnly,
            instruction_tuned: false,
        });
        Self {
            info,
            endpoint: endpoint.to_string(),
            token,
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("default TLS backend available"),
            max_attempts: 3,
            backoff: Duration::from_millis(500),
            counters: Counters::default(),
        }
    }

    /// Reads the endpoint and token from `REDLINE_REMOTE_ENDPOINT` and
    /// `REDLINE_REMOTE_TOKEN`.
    pub fn from_env(model: &str) -> Result<Self, BackendError> {
        let endpoint = std::env::var(ENDPOINT_VAR).map_err(|_| BackendError::Remote {
            attempts: 0,
            message: format!("{ENDPOINT_VAR} is not set"),
        })?;
        let token = std::env::var(TOKEN_VAR).ok();
        Ok(Self::new(model, &endpoint, token))
    }

    pub fn with_max_attempts(mut self, attempts: usize) -> Self {
        self.max_attempts = attempts.max(1);
        self
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn call_once(&self, request: &GenerationRequest) -> Result<String, String> {
        let mut builder = self.client.post(&self.endpoint).json(request);
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().map_err(|e| {
            // reqwest redacts credentials from its Display output; the URL
            // may appear, which is fine, but the token never does.
            format!("transport error: {e}")
        })?;
        let status = response.status();
        let body = response
            .text()
            .map_err(|e| format!("failed reading response: {e}"))?;
        if !status.is_success() {
            return Err(format!("endpoint returned {status}"));
        }
        parse_response(&body)
    }
}

impl Backend for RemoteBackend {
    fn info(&self) -> &ModelInfo {
        &self.info
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            encode: false,
            generate: true,
            trainable: false,
        }
    }

    fn encode_last(&mut self, _: &EncodedInput) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::Unsupported {
            model: self.info.name.clone(),
            operation: "encoding".into(),
        })
    }

    fn encode_spans(&mut self, _: &EncodedInput) -> Result<super::SpanPair, BackendError> {
        Err(BackendError::Unsupported {
            model: self.info.name.clone(),
            operation: "span encoding".into(),
        })
    }

    fn generate(
        &mut self,
        input: &EncodedInput,
        max_new_tokens: usize,
    ) -> Result<String, BackendError> {
        let request = build_request(&self.info.name, &input.text, max_new_tokens);
        let mut last_error = String::new();
        for attempt in 1..=self.max_attempts {
            match self.call_once(&request) {
                Ok(text) => {
                    // Remote endpoints do not report decode steps, so only
                    // whole calls are counted.
                    self.counters.forward_passes += 1;
                    return Ok(text);
                }
                Err(message) => {
                    last_error = message;
                    if attempt < self.max_attempts {
                        std::thread::sleep(self.backoff);
                    }
                }
            }
        }
        Err(BackendError::Remote {
            attempts: self.max_attempts,
            message: last_error,
        })
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn reset_counters(&mut self) {
        self.counters = Counters::default();
    }
}
