use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use serde_json::{json, Value};

use super::{
    ChatBackend, ChatRequest, ChatResponse, HttpSpec, LlmError, RequestLimiter, TokenUsage,
};

/// Minimal chat-completion client. Field names other than the reply
/// location are fixed; `response_pointer` adapts to servers that put the
/// text elsewhere.
pub struct HttpBackend {
    spec: HttpSpec,
    client: reqwest::blocking::Client,
    limiter: Option<Arc<RequestLimiter>>,
}

enum Attempt {
    Done(ChatResponse),
    Retry(String),
    Fatal(LlmError),
}

impl HttpBackend {
    pub fn new(spec: HttpSpec, limiter: Option<Arc<RequestLimiter>>) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(spec.request_timeout.max(0.001)))
            .build()
            .map_err(|e| LlmError::Load {
                context: "http client".into(),
                message: e.to_string(),
            })?;
        Ok(Self {
            spec,
            client,
            limiter,
        })
    }

    fn url(&self) -> String {
        format!(
            "{}/{}",
            self.spec.base_url.trim_end_matches('/'),
            self.spec.path.trim_start_matches('/')
        )
    }

    fn token(&self) -> Result<Option<String>, LlmError> {
        match &self.spec.auth_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .ok()
                .filter(|v| !v.is_empty())
                .map(Some)
                .ok_or_else(|| LlmError::AuthMissing(var.clone())),
        }
    }

    fn attempt(&self, body: &Value, token: Option<&str>, start: Instant) -> Attempt {
        let mut req = self.client.post(self.url()).json(body);
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("transport: {e}")),
        };
        let status = resp.status();
        let text = resp.text().unwrap_or_default();
        if status.is_server_error() || status.as_u16() == 429 {
            return Attempt::Retry(format!("HTTP {}: {}", status.as_u16(), snippet(&text)));
        }
        if !status.is_success() {
            return Attempt::Fatal(LlmError::Status {
                status: status.as_u16(),
                body: snippet(&text),
            });
        }
        let Ok(value) = serde_json::from_str::<Value>(&text) else {
            return Attempt::Fatal(LlmError::MalformedResponse {
                pointer: self.spec.response_pointer.clone(),
            });
        };
        let Some(content) = value.pointer(&self.spec.response_pointer).and_then(Value::as_str)
        else {
            return Attempt::Fatal(LlmError::MalformedResponse {
                pointer: self.spec.response_pointer.clone(),
            });
        };
        let usage = value.get("usage").and_then(|u| {
            Some(TokenUsage {
                prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
                completion_tokens: u.get("completion_tokens")?.as_u64()?,
            })
        });
        Attempt::Done(ChatResponse {
            content: content.to_string(),
            backend_id: self.id(),
            latency: start.elapsed().as_secs_f64(),
            token_usage: usage,
        })
    }

    fn backoff(&self, retry: u32) -> Duration {
        let p = &self.spec.retry;
        let base = (p.base_backoff * 2f64.powi(retry as i32)).min(p.max_backoff);
        let jitter = rand::thread_rng().gen_range(0.0..=0.5);
        Duration::from_secs_f64((base * (1.0 + jitter)).max(0.0))
    }
}

fn snippet(s: &str) -> String {
    s.chars().take(300).collect()
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.spec.model)
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let token = self.token()?;
        let body = json!({
            "model": self.spec.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let _permit = self.limiter.as_ref().map(|l| l.acquire());
        let start = Instant::now();
        let attempts = self.spec.retry.max_retries + 1;
        let mut last = String::new();
        for i in 0..attempts {
            if i > 0 {
                thread::sleep(self.backoff(i - 1));
            }
            match self.attempt(&body, token.as_deref(), start) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(why) => {
                    tracing::warn!(attempt = i + 1, "chat request failed: {why}");
                    last = why;
                }
            }
        }
        Err(LlmError::RetriesExhausted { attempts, last })
    }
}
