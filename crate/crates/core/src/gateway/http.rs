//! JSON-over-HTTP backend.
//!
//! Wire format (see `fixtures/http_wire.json`):
//! completion `POST endpoint {"model","temperature","prompt"}` → `{"text"}`;
//! embedding `POST embed_endpoint {"model","input"}` → `{"embedding": [..]}`.
//! A bearer token is read from `TAXONOMIST_API_KEY` when set.

use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::{json, Value};

use super::{with_retries, Backend, BackendConfig, Completion, CompletionRequest, EmbeddingVector, GatewayError};

pub const API_KEY_ENV: &str = "TAXONOMIST_API_KEY";

pub struct HttpBackend {
    config: BackendConfig,
    endpoint: String,
    agent: ureq::Agent,
    id: String,
}

#[derive(Deserialize)]
struct CompletionBody {
    text: String,
}

#[derive(Deserialize)]
struct EmbeddingBody {
    embedding: Vec<f64>,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, GatewayError> {
        let endpoint = config
            .endpoint
            .clone()
            .filter(|e| !e.trim().is_empty())
            .ok_or_else(|| GatewayError::Config("http backend needs an endpoint".into()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            id: format!("http:{}", config.model_id),
            endpoint,
            agent,
            config,
        })
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value, GatewayError> {
        with_retries(
            self.config.retry_limit,
            Duration::from_millis(self.config.retry_backoff_ms),
            || self.post_once(url, body),
        )
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value, GatewayError> {
        let mut request = self.agent.post(url).header("Content-Type", "application/json");
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(map_error)?;
        let status = response.status().as_u16();
        match status {
            200..=299 => response
                .body_mut()
                .read_json::<Value>()
                .map_err(|e| GatewayError::UnparseableResponse { raw: e.to_string() }),
            429 => Err(GatewayError::RateLimited),
            // server-side failures are worth another attempt
            500..=599 => Err(GatewayError::Transport(format!("HTTP {status}"))),
            other => Err(GatewayError::Status(other)),
        }
    }
}

fn map_error(e: ureq::Error) -> GatewayError {
    match e {
        ureq::Error::Timeout(_) => GatewayError::Timeout,
        ureq::Error::StatusCode(429) => GatewayError::RateLimited,
        ureq::Error::StatusCode(s) => GatewayError::Status(s),
        other => GatewayError::Transport(other.to_string()),
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: CompletionRequest<'_>) -> Result<Completion, GatewayError> {
        if request.prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let started = Instant::now();
        let body = json!({
            "model": self.config.model_id,
            "temperature": self.config.temperature,
            "prompt": request.prompt,
        });
        let value = self.post(&self.endpoint, &body)?;
        let parsed: CompletionBody = serde_json::from_value(value.clone())
            .map_err(|_| GatewayError::UnparseableResponse { raw: value.to_string() })?;
        Ok(Completion {
            text: parsed.text,
            latency: started.elapsed(),
        })
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyText);
        }
        let url = self
            .config
            .embed_endpoint
            .as_deref()
            .ok_or(GatewayError::Unsupported("embeddings without embed_endpoint"))?;
        let value = self.post(url, &json!({"model": self.config.model_id, "input": text}))?;
        let parsed: EmbeddingBody = serde_json::from_value(value.clone())
            .map_err(|_| GatewayError::UnparseableResponse { raw: value.to_string() })?;
        Ok(EmbeddingVector::new(parsed.embedding, self.id.clone()))
    }
}
