use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{Capabilities, GatewayError, GenerationBackend, GenerationRequest};

/// Client for an OpenAI-style `POST {base_url}/chat/completions` endpoint.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    base_url: String,
    model: String,
    api_key: Option<String>,
    timeout: Duration,
    accepts_frames: bool,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(60),
            accepts_frames: false,
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_frame_attachments(mut self, accepts: bool) -> Self {
        self.accepts_frames = accepts;
        self
    }

    /// JSON body for a request.
    pub fn request_body(&self, req: &GenerationRequest) -> Value {
        let user = if self.accepts_frames && !req.attachments.is_empty() {
            let mut parts = vec![json!({ "type": "text", "text": req.user })];
            for png in &req.attachments {
                let b64 = base64::engine::general_purpose::STANDARD.encode(png);
                parts.push(json!({
                    "type": "image_url",
                    "image_url": { "url": format!("data:image/png;base64,{b64}") }
                }));
            }
            Value::Array(parts)
        } else {
            Value::String(req.user.clone())
        };
        let mut body = json!({
            "model": self.model,
            "messages": [
                { "role": "system", "content": req.system },
                { "role": "user", "content": user },
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

impl GenerationBackend for HttpBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            text_only: !self.accepts_frames,
            accepts_frame_attachments: self.accepts_frames,
        }
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String, GatewayError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let mut call = agent.post(&url);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call.send_json(self.request_body(req)).map_err(|e| match e {
            ureq::Error::Timeout(_) => GatewayError::BackendTimeout(self.timeout),
            other => GatewayError::Transport(other.to_string()),
        })?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(GatewayError::BackendRefusal(format!("HTTP {status}: {text}")));
        }
        let v: Value = serde_json::from_str(&text).map_err(|_| GatewayError::ParseFailure { raw: text.clone() })?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or(GatewayError::ParseFailure { raw: text })
    }
}
