//! OpenAI-compatible `chat/completions` and `embeddings` clients.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatProvider, ChatRequest, EmbeddingProvider, EmbeddingVector, ProviderError, API_KEY_ENV, BASE_URL_ENV};

fn default_api_key_env() -> String {
    API_KEY_ENV.to_string()
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    3
}

fn default_backoff() -> u64 {
    500
}

fn default_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderConfig {
    /// Empty means: take `INTA_BASE_URL` from the environment.
    #[serde(default)]
    pub base_url: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// First backoff delay; doubles on every retry.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    /// Maximum inputs per embeddings request.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl ProviderConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key_env: default_api_key_env(),
            model: model.into(),
            timeout_secs: default_timeout(),
            retries: default_retries(),
            backoff_ms: default_backoff(),
            batch_size: default_batch(),
        }
    }

    fn resolved_base_url(&self) -> Result<String, ProviderError> {
        let url = if self.base_url.is_empty() {
            std::env::var(BASE_URL_ENV)
                .map_err(|_| ProviderError::InvalidRequest(format!("no base_url and {BASE_URL_ENV} unset")))?
        } else {
            self.base_url.clone()
        };
        Ok(url.trim_end_matches('/').to_string())
    }

    fn api_key(&self) -> Result<String, ProviderError> {
        std::env::var(&self.api_key_env)
            .map_err(|_| ProviderError::Auth(format!("environment variable {} is not set", self.api_key_env)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFailure {
    Timeout,
    Other(String),
}

/// Minimal blocking POST used by the HTTP providers; swappable in tests.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: &str, body: &Value, timeout: Duration) -> Result<HttpResponse, TransportFailure>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct UreqTransport;

impl HttpTransport for UreqTransport {
    fn post_json(&self, url: &str, bearer: &str, body: &Value, timeout: Duration) -> Result<HttpResponse, TransportFailure> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let result = agent
            .post(url)
            .header("Authorization", &format!("Bearer {bearer}"))
            .header("Content-Type", "application/json")
            .send(body.to_string());
        match result {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let body = resp
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| TransportFailure::Other(e.to_string()))?;
                Ok(HttpResponse { status, body })
            }
            Err(ureq::Error::Timeout(_)) => Err(TransportFailure::Timeout),
            Err(e) => Err(TransportFailure::Other(e.to_string())),
        }
    }
}

/// POSTs with retry and exponential backoff on timeouts, 429 and 5xx.
fn post_with_retry(
    transport: &dyn HttpTransport,
    config: &ProviderConfig,
    path: &str,
    body: &Value,
) -> Result<String, ProviderError> {
    let url = format!("{}/{path}", config.resolved_base_url()?);
    let key = config.api_key()?;
    let timeout = Duration::from_secs(config.timeout_secs);
    let mut attempt = 0u32;
    loop {
        let failure = match transport.post_json(&url, &key, body, timeout) {
            Ok(resp) if (200..300).contains(&resp.status) => return Ok(resp.body),
            Ok(resp) if resp.status == 401 || resp.status == 403 => {
                return Err(ProviderError::Auth(format!("HTTP {}", resp.status)))
            }
            Ok(resp) if resp.status == 429 => ProviderError::RateLimited,
            Ok(resp) if resp.status >= 500 => ProviderError::Http {
                status: resp.status,
                body: resp.body,
            },
            Ok(resp) => {
                return Err(ProviderError::Http {
                    status: resp.status,
                    body: resp.body,
                })
            }
            Err(TransportFailure::Timeout) => ProviderError::Timeout,
            Err(TransportFailure::Other(msg)) => ProviderError::Transport(msg),
        };
        if attempt >= config.retries {
            return Err(failure);
        }
        let delay = config.backoff_ms.saturating_mul(1u64 << attempt.min(16));
        log::warn!("{path}: attempt {} failed ({failure}); retrying in {delay} ms", attempt + 1);
        std::thread::sleep(Duration::from_millis(delay));
        attempt += 1;
    }
}

pub struct OpenAiChat {
    config: ProviderConfig,
    transport: Box<dyn HttpTransport>,
}

impl OpenAiChat {
    pub fn new(config: ProviderConfig) -> Self {
        Self::with_transport(config, Box::new(UreqTransport))
    }

    pub fn with_transport(config: ProviderConfig, transport: Box<dyn HttpTransport>) -> Self {
        Self { config, transport }
    }

    fn body(&self, request: &ChatRequest) -> Value {
        let mut messages = vec![json!({"role": "system", "content": request.system})];
        messages.extend(request.messages.iter().map(|m| json!({"role": m.role, "content": m.content})));
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        })
    }
}

impl ChatProvider for OpenAiChat {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        request.validate()?;
        let raw = post_with_retry(self.transport.as_ref(), &self.config, "chat/completions", &self.body(request))?;
        let v: Value = serde_json::from_str(&raw).map_err(|e| ProviderError::MalformedResponse(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ProviderError::MalformedResponse("missing choices[0].message.content".into()))
    }
}

pub struct OpenAiEmbedder {
    config: ProviderConfig,
    transport: Box<dyn HttpTransport>,
}

impl OpenAiEmbedder {
    pub fn new(config: ProviderConfig) -> Self {
        Self::with_transport(config, Box::new(UreqTransport))
    }

    pub fn with_transport(config: ProviderConfig, transport: Box<dyn HttpTransport>) -> Self {
        Self { config, transport }
    }
}

#[derive(Deserialize)]
struct EmbeddingItem {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

impl EmbeddingProvider for OpenAiEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::InvalidRequest("no texts to embed".into()));
        }
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.config.batch_size.max(1)) {
            let body = json!({"model": self.config.model, "input": batch});
            let raw = post_with_retry(self.transport.as_ref(), &self.config, "embeddings", &body)?;
            let mut resp: EmbeddingResponse =
                serde_json::from_str(&raw).map_err(|e| ProviderError::MalformedResponse(e.to_string()))?;
            if resp.data.len() != batch.len() {
                return Err(ProviderError::MalformedResponse(format!(
                    "{} embeddings for {} inputs",
                    resp.data.len(),
                    batch.len()
                )));
            }
            resp.data.sort_by_key(|item| item.index.unwrap_or(0));
            out.extend(resp.data.into_iter().map(|item| EmbeddingVector { values: item.embedding }));
        }
        if let Some(first) = out.first().map(EmbeddingVector::dim) {
            if let Some(bad) = out.iter().find(|v| v.dim() != first) {
                return Err(ProviderError::DimensionMismatch(first, bad.dim()));
            }
            if first == 0 {
                return Err(ProviderError::MalformedResponse("zero-length embedding".into()));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Scripted {
        replies: Mutex<Vec<Result<HttpResponse, TransportFailure>>>,
        seen: Mutex<Vec<Value>>,
    }

    impl Scripted {
        fn new(mut replies: Vec<Result<HttpResponse, TransportFailure>>) -> Self {
            replies.reverse();
            Self {
                replies: Mutex::new(replies),
                seen: Mutex::new(Vec::new()),
            }
        }
    }

    impl HttpTransport for &'static Scripted {
        fn post_json(&self, _url: &str, _bearer: &str, body: &Value, _t: Duration) -> Result<HttpResponse, TransportFailure> {
            self.seen.lock().unwrap().push(body.clone());
            self.replies.lock().unwrap().pop().unwrap_or(Err(TransportFailure::Timeout))
        }
    }

    fn config() -> ProviderConfig {
        // a variable that is always present in a test process
        ProviderConfig {
            base_url: "http://localhost:1/v1/".into(),
            api_key_env: "PATH".into(),
            model: "m".into(),
            timeout_secs: 1,
            retries: 2,
            backoff_ms: 0,
            batch_size: 2,
        }
    }

    fn ok(body: &str) -> Result<HttpResponse, TransportFailure> {
        Ok(HttpResponse {
            status: 200,
            body: body.into(),
        })
    }

    fn leak(s: Scripted) -> &'static Scripted {
        Box::leak(Box::new(s))
    }

    #[test]
    fn chat_parses_content_and_sends_system_prompt() {
        let t = leak(Scripted::new(vec![ok(r#"{"choices":[{"message":{"content":"OK"}}]}"#)]));
        let chat = OpenAiChat::with_transport(config(), Box::new(t));
        assert_eq!(chat.chat(&ChatRequest::new("sys", "hi")).unwrap(), "OK");
        let sent = &t.seen.lock().unwrap()[0];
        assert_eq!(sent["messages"][0]["role"], "system");
        assert_eq!(sent["messages"][1]["content"], "hi");
        assert_eq!(sent["temperature"], 0.0);
    }

    #[test]
    fn retries_then_times_out() {
        let t = leak(Scripted::new(vec![
            Err(TransportFailure::Timeout),
            Err(TransportFailure::Timeout),
            Err(TransportFailure::Timeout),
        ]));
        let chat = OpenAiChat::with_transport(config(), Box::new(t));
        assert_eq!(chat.chat(&ChatRequest::new("s", "u")), Err(ProviderError::Timeout));
        assert_eq!(t.seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn transient_failure_recovers() {
        let t = leak(Scripted::new(vec![
            Ok(HttpResponse { status: 429, body: String::new() }),
            Ok(HttpResponse { status: 503, body: String::new() }),
            ok(r#"{"choices":[{"message":{"content":"fine"}}]}"#),
        ]));
        let chat = OpenAiChat::with_transport(config(), Box::new(t));
        assert_eq!(chat.chat(&ChatRequest::new("s", "u")).unwrap(), "fine");
    }

    #[test]
    fn auth_and_malformed_are_not_retried() {
        let t = leak(Scripted::new(vec![Ok(HttpResponse { status: 401, body: String::new() })]));
        let chat = OpenAiChat::with_transport(config(), Box::new(t));
        assert!(matches!(chat.chat(&ChatRequest::new("s", "u")), Err(ProviderError::Auth(_))));
        let t = leak(Scripted::new(vec![ok("{}")]));
        let chat = OpenAiChat::with_transport(config(), Box::new(t));
        assert!(matches!(chat.chat(&ChatRequest::new("s", "u")), Err(ProviderError::MalformedResponse(_))));
        assert_eq!(t.seen.lock().unwrap().len(), 1);
        let t = leak(Scripted::new(vec![
            Ok(HttpResponse { status: 429, body: String::new() }),
            Ok(HttpResponse { status: 429, body: String::new() }),
            Ok(HttpResponse { status: 429, body: String::new() }),
        ]));
        let chat = OpenAiChat::with_transport(config(), Box::new(t));
        assert_eq!(chat.chat(&ChatRequest::new("s", "u")), Err(ProviderError::RateLimited));
    }

    #[test]
    fn missing_key_is_auth_error() {
        let mut c = config();
        c.api_key_env = "INTA_TEST_SURELY_UNSET_VARIABLE".into();
        let t = leak(Scripted::new(vec![]));
        let chat = OpenAiChat::with_transport(c, Box::new(t));
        assert!(matches!(chat.chat(&ChatRequest::new("s", "u")), Err(ProviderError::Auth(_))));
    }

    #[test]
    fn embeddings_are_batched_and_ordered() {
        let t = leak(Scripted::new(vec![
            ok(r#"{"data":[{"index":1,"embedding":[0.0,1.0]},{"index":0,"embedding":[1.0,0.0]}]}"#),
            ok(r#"{"data":[{"index":0,"embedding":[0.5,0.5]}]}"#),
        ]));
        let e = OpenAiEmbedder::with_transport(config(), Box::new(t));
        let v = e.embed(&["a".into(), "b".into(), "c".into()]).unwrap();
        assert_eq!(v[0].values, vec![1.0, 0.0]);
        assert_eq!(v[1].values, vec![0.0, 1.0]);
        assert_eq!(v[2].values, vec![0.5, 0.5]);
        let seen = t.seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert_eq!(seen[0]["input"], json!(["a", "b"]));
    }

    #[test]
    fn ragged_embeddings_rejected() {
        let t = leak(Scripted::new(vec![ok(
            r#"{"data":[{"index":0,"embedding":[1.0]},{"index":1,"embedding":[1.0,2.0]}]}"#,
        )]));
        let e = OpenAiEmbedder::with_transport(config(), Box::new(t));
        assert_eq!(e.embed(&["a".into(), "b".into()]), Err(ProviderError::DimensionMismatch(1, 2)));
    }

    #[test]
    #[ignore = "needs INTA_API_KEY and INTA_BASE_URL pointing at a live endpoint"]
    fn live_smoke() {
        let model = std::env::var("INTA_MODEL").unwrap_or_else(|_| "gpt-4o-mini".into());
        let chat = OpenAiChat::new(ProviderConfig::new("", model));
        let reply = chat.chat(&ChatRequest::new("You are terse.", "Say OK.")).unwrap();
        assert!(!reply.trim().is_empty());
    }
}
