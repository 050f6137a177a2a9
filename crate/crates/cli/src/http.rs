//! Chat-completions client for an OpenAI-compatible VLM endpoint.

use std::time::Duration;

use base64::Engine;
use regiontok_core::instruct::{VlmClient, VlmError, VlmRequest};
use serde_json::{json, Value};

pub const ENV_ENDPOINT: &str = "VLM_ENDPOINT";
pub const ENV_MODEL: &str = "VLM_MODEL";
pub const ENV_API_KEY: &str = "VLM_API_KEY";

#[derive(Debug)]
pub struct HttpVlmClient {
    pub endpoint: String,
    pub model: String,
    api_key: Option<String>,
    /// Extra attempts after the first for transport errors, 429 and 5xx.
    pub retries: u32,
    pub backoff: Duration,
    agent: ureq::Agent,
}

impl HttpVlmClient {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>, timeout: Duration, retries: u32) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key,
            retries,
            backoff: Duration::from_millis(500),
            agent,
        }
    }

    pub fn from_env(timeout: Duration, retries: u32) -> Result<Self, VlmError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
        let endpoint = var(ENV_ENDPOINT).ok_or_else(|| VlmError::Config(format!("{ENV_ENDPOINT} is not set")))?;
        let model = var(ENV_MODEL).ok_or_else(|| VlmError::Config(format!("{ENV_MODEL} is not set")))?;
        Ok(Self::new(&endpoint, &model, var(ENV_API_KEY), timeout, retries))
    }

    fn attempt(&self, body: &str) -> Result<String, VlmError> {
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| VlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| VlmError::Transport(e.to_string()))?;
        if status != 200 {
            return Err(VlmError::Status { status, body: text.chars().take(500).collect() });
        }
        reply_text(&text)
    }
}

/// The request as a chat-completions body: system prompt, then the request
/// document with the marked image attached when there is one.
pub fn request_body(model: &str, request: &VlmRequest) -> Value {
    let mut content = vec![json!({"type": "text", "text": request.document()})];
    if let Some(png) = &request.image_png {
        let b64 = base64::engine::general_purpose::STANDARD.encode(png);
        content.push(json!({"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}}));
    }
    json!({
        "model": model,
        "temperature": 0,
        "messages": [
            {"role": "system", "content": request.system},
            {"role": "user", "content": content},
        ],
    })
}

pub fn reply_text(body: &str) -> Result<String, VlmError> {
    let v: Value = serde_json::from_str(body).map_err(|e| VlmError::Format(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| VlmError::Format("no choices[0].message.content".into()))
}

fn retryable(e: &VlmError) -> bool {
    match e {
        VlmError::Transport(_) => true,
        VlmError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl VlmClient for HttpVlmClient {
    fn complete(&self, request: &VlmRequest) -> Result<String, VlmError> {
        let body = request_body(&self.model, request).to_string();
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Err(e) if attempt < self.retries && retryable(&e) => {
                    log::warn!("image {}: attempt {} failed: {e}", request.image_id(), attempt + 1);
                    std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_reply() {
        let body = r#"{"choices": [{"message": {"role": "assistant", "content": "User: hi\nAssistant: yo"}}]}"#;
        assert_eq!(reply_text(body).unwrap(), "User: hi\nAssistant: yo");
        assert!(matches!(reply_text("{}"), Err(VlmError::Format(_))));
        assert!(matches!(reply_text("nope"), Err(VlmError::Format(_))));
    }

    #[test]
    fn retry_policy() {
        assert!(retryable(&VlmError::Transport("reset".into())));
        assert!(retryable(&VlmError::Status { status: 503, body: String::new() }));
        assert!(retryable(&VlmError::Status { status: 429, body: String::new() }));
        assert!(!retryable(&VlmError::Status { status: 400, body: String::new() }));
    }

    #[test]
    fn unreachable_endpoint_is_a_transport_error() {
        let mut c = HttpVlmClient::new("http://127.0.0.1:9/v1/chat/completions", "m", None, Duration::from_secs(2), 1);
        c.backoff = Duration::from_millis(1);
        let fx = regiontok_core::fixtures::synthetic_vg(1, 0);
        let prepared = regiontok_core::instruct::prepare_requests(
            &fx.images,
            &fx.captions,
            &fx.qas,
            &regiontok_core::instruct::default_fewshot(),
            &regiontok_core::instruct::InstructConfig { include_sparse: true, ..Default::default() },
        )
        .unwrap();
        let req = prepared[0].request.as_ref().unwrap();
        assert!(matches!(c.complete(req), Err(VlmError::Transport(_))));
        let body = request_body("m", req);
        assert_eq!(body["messages"][1]["content"][0]["text"], req.document());
    }
}
