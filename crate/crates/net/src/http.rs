//! Chat-completion transport, technique-page fetcher and remote embedder over HTTP.

use std::time::Duration;

use privesc_core::gateway::{CompletionRequest, ModelTransport, TransportError, TransportReply, Usage};
use privesc_core::rag::{Embedder, Embedding, FetchedPage, PageFetcher};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

pub const API_KEY_ENV: &str = "MODEL_API_KEY";
pub const API_BASE_ENV: &str = "MODEL_API_BASE";
pub const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";
pub const REMOTE_EMBEDDING_DIMENSION: usize = 1536;

const USER_AGENT: &str = concat!("privesc/", env!("CARGO_PKG_VERSION"));

fn client(timeout: Duration) -> Client {
    Client::builder()
        .timeout(timeout)
        .user_agent(USER_AGENT)
        .build()
        .expect("HTTP client with default TLS settings")
}

fn api_base_from_env() -> String {
    std::env::var(API_BASE_ENV)
        .ok()
        .filter(|s| !s.trim().is_empty())
        .unwrap_or_else(|| DEFAULT_API_BASE.to_string())
}

fn api_key_from_env() -> Result<String, TransportError> {
    std::env::var(API_KEY_ENV)
        .ok()
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| TransportError::Auth(format!("{API_KEY_ENV} is not set")))
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    temperature: f32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

/// Chat-completion client. The key is sent as a bearer token and never logged.
pub struct HttpTransport {
    client: Client,
    endpoint: String,
    api_key: String,
}

impl std::fmt::Debug for HttpTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpTransport").field("endpoint", &self.endpoint).finish_non_exhaustive()
    }
}

impl HttpTransport {
    pub const TIMEOUT: Duration = Duration::from_secs(120);

    pub fn new(api_base: &str, api_key: impl Into<String>) -> Self {
        HttpTransport {
            client: client(Self::TIMEOUT),
            endpoint: format!("{}/chat/completions", api_base.trim_end_matches('/')),
            api_key: api_key.into(),
        }
    }

    /// Reads `MODEL_API_KEY` and optionally `MODEL_API_BASE`.
    pub fn from_env() -> Result<Self, TransportError> {
        Ok(Self::new(&api_base_from_env(), api_key_from_env()?))
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl ModelTransport for HttpTransport {
    fn send(&mut self, request: &CompletionRequest) -> Result<TransportReply, TransportError> {
        let body = ChatBody {
            model: &request.model_id,
            messages: [
                ChatMessage {
                    role: "system",
                    content: &request.system,
                },
                ChatMessage {
                    role: "user",
                    content: &request.user,
                },
            ],
            temperature: 0.0,
        };
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| TransportError::Network(e.without_url().to_string()))?;
        let status = resp.status();
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Err(TransportError::Auth(format!("provider answered {status}")));
        }
        if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
            return Err(TransportError::Network(format!("provider answered {status}")));
        }
        if !status.is_success() {
            return Err(TransportError::Protocol(format!("provider answered {status}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| TransportError::Protocol(format!("bad completion body: {}", e.without_url())))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| TransportError::Protocol("completion has no choices".into()))?
            .message
            .content
            .unwrap_or_default();
        Ok(TransportReply {
            text,
            usage: parsed.usage.map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            }),
        })
    }
}

/// Fetches technique pages with a short timeout. A mirror base replaces the
/// public site's origin, for labs without outbound access.
pub struct HttpFetcher {
    client: Client,
    mirror: Option<String>,
}

impl std::fmt::Debug for HttpFetcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("HttpFetcher")
    }
}

impl HttpFetcher {
    pub const TIMEOUT: Duration = Duration::from_secs(10);

    pub const PUBLIC_ORIGIN: &'static str = "https://gtfobins.github.io";

    pub fn new() -> Self {
        HttpFetcher {
            client: client(Self::TIMEOUT),
            mirror: None,
        }
    }

    pub fn with_mirror(base: &str) -> Self {
        HttpFetcher {
            mirror: Some(base.trim_end_matches('/').to_string()),
            ..Self::new()
        }
    }

    fn resolve(&self, url: &str) -> String {
        match (&self.mirror, url.strip_prefix(Self::PUBLIC_ORIGIN)) {
            (Some(base), Some(path)) => format!("{base}{path}"),
            _ => url.to_string(),
        }
    }
}

impl Default for HttpFetcher {
    fn default() -> Self {
        Self::new()
    }
}

impl PageFetcher for HttpFetcher {
    fn fetch(&self, url: &str) -> Result<FetchedPage, String> {
        let resp = self.client.get(self.resolve(url)).send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| e.to_string())?;
        Ok(FetchedPage { status, body })
    }
}

#[derive(Serialize)]
struct EmbeddingBody<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
}

/// Provider-hosted embeddings. A failed call yields the zero vector, which
/// ranks below every real match.
pub struct RemoteEmbedder {
    client: Client,
    endpoint: String,
    api_key: String,
    model: String,
    dimension: usize,
}

impl std::fmt::Debug for RemoteEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteEmbedder")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .finish_non_exhaustive()
    }
}

impl RemoteEmbedder {
    pub const DEFAULT_MODEL: &'static str = "text-embedding-3-small";

    pub fn new(api_base: &str, api_key: impl Into<String>, model: &str, dimension: usize) -> Self {
        RemoteEmbedder {
            client: client(HttpTransport::TIMEOUT),
            endpoint: format!("{}/embeddings", api_base.trim_end_matches('/')),
            api_key: api_key.into(),
            model: model.to_string(),
            dimension,
        }
    }

    pub fn from_env() -> Result<Self, TransportError> {
        Ok(Self::new(
            &api_base_from_env(),
            api_key_from_env()?,
            Self::DEFAULT_MODEL,
            REMOTE_EMBEDDING_DIMENSION,
        ))
    }

    pub fn try_embed(&self, text: &str) -> Result<Embedding<f32>, TransportError> {
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&EmbeddingBody {
                model: &self.model,
                input: text,
            })
            .send()
            .map_err(|e| TransportError::Network(e.without_url().to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(TransportError::Protocol(format!("embedding endpoint answered {status}")));
        }
        let parsed: EmbeddingResponse = resp
            .json()
            .map_err(|e| TransportError::Protocol(format!("bad embedding body: {}", e.without_url())))?;
        let values = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| TransportError::Protocol("embedding response has no data".into()))?
            .embedding;
        if values.len() != self.dimension {
            return Err(TransportError::Protocol(format!(
                "expected {} dimensions, got {}",
                self.dimension,
                values.len()
            )));
        }
        Ok(Embedding::new(values))
    }
}

impl Embedder<f32> for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Embedding<f32> {
        self.try_embed(text).unwrap_or_else(|e| {
            log::error!("remote embedding failed: {e}");
            Embedding::new(vec![0.0; self.dimension])
        })
    }
}
