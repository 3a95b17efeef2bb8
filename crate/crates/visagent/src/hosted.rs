//! Adapters for hosted models over HTTP.
//!
//! Neither adapter is used by the test suites. Credentials and endpoints come
//! from environment variables:
//!
//! | variable | used by | default |
//! |---|---|---|
//! | `VISAGENT_API_KEY` | both | required |
//! | `VISAGENT_CHAT_URL` | `hosted-chat` | `https://api.openai.com/v1/chat/completions` |
//! | `VISAGENT_CHAT_MODEL` | `hosted-chat` | `gpt-4o` |
//! | `VISAGENT_IMAGE_URL` | `hosted-image` | required |
//!
//! `hosted-chat` speaks the chat-completions protocol in JSON mode: the
//! instruction is the system message and the payload, serialized, is the user
//! message. `hosted-image` posts
//! `{"prompt", "width", "height", "seed", "kind", "reference_png"?}` and
//! expects `{"png": "<base64>"}` back; `reference_png` carries the stored
//! subject image for reference conditioning.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};
use visagent_core::backend::{
    AgentRole, BackendDescriptor, BackendError, Capability, GenerationRequest, HashTokenEncoder, ImageGeneratorBackend,
    TextModelBackend, TokenEncoder,
};
use visagent_core::backend::mock_image::REFERENCE_TOKEN_DIM;
use visagent_core::image::{ElementKind, Raster};
use visagent_core::tensor::Matrix;

use crate::artifacts::{decode_png, encode_png};
use crate::config::ConfigError;

pub const API_KEY_ENV: &str = "VISAGENT_API_KEY";
pub const CHAT_URL_ENV: &str = "VISAGENT_CHAT_URL";
pub const CHAT_MODEL_ENV: &str = "VISAGENT_CHAT_MODEL";
pub const IMAGE_URL_ENV: &str = "VISAGENT_IMAGE_URL";

fn env(key: &str) -> Option<String> {
    std::env::var(key).ok().filter(|v| !v.is_empty())
}

fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder().timeout(Duration::from_secs(300)).build().expect("HTTP client")
}

pub struct HostedChatBackend {
    url: String,
    model: String,
    key: String,
    http: reqwest::blocking::Client,
}

impl HostedChatBackend {
    pub fn from_env() -> Result<Self, ConfigError> {
        let key = env(API_KEY_ENV).ok_or_else(|| ConfigError::new(format!("hosted-chat needs {API_KEY_ENV}")))?;
        Ok(Self {
            url: env(CHAT_URL_ENV).unwrap_or_else(|| "https://api.openai.com/v1/chat/completions".into()),
            model: env(CHAT_MODEL_ENV).unwrap_or_else(|| "gpt-4o".into()),
            key,
            http: client(),
        })
    }

    /// Request body for one completion.
    pub fn request_body(model: &str, instruction: &str, payload: &Value) -> Value {
        json!({
            "model": model,
            "temperature": 0,
            "response_format": {"type": "json_object"},
            "messages": [
                {"role": "system", "content": instruction},
                {"role": "user", "content": payload.to_string()},
            ],
        })
    }

    /// Extracts the JSON document from a chat-completions reply.
    pub fn parse_reply(reply: &Value) -> Result<Value, String> {
        let content = reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or("reply has no message content")?;
        serde_json::from_str(content).map_err(|e| format!("message content is not JSON: {e}"))
    }
}

impl TextModelBackend for HostedChatBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::new(format!("hosted-chat:{}", self.model), Capability::Text, false, true)
    }

    fn complete(&mut self, _role: AgentRole, instruction: &str, payload: &Value) -> Result<Value, BackendError> {
        let fail = |m: String| BackendError::new("hosted-chat", m);
        let resp = self
            .http
            .post(&self.url)
            .bearer_auth(&self.key)
            .json(&Self::request_body(&self.model, instruction, payload))
            .send()
            .map_err(|e| fail(e.to_string()))?;
        let status = resp.status();
        let body: Value = resp.json().map_err(|e| fail(e.to_string()))?;
        if !status.is_success() {
            return Err(fail(format!("HTTP {status}: {body}")));
        }
        Self::parse_reply(&body).map_err(fail)
    }
}

pub struct HostedImageBackend {
    url: String,
    key: String,
    http: reqwest::blocking::Client,
}

impl HostedImageBackend {
    pub fn from_env() -> Result<Self, ConfigError> {
        let key = env(API_KEY_ENV).ok_or_else(|| ConfigError::new(format!("hosted-image needs {API_KEY_ENV}")))?;
        let url = env(IMAGE_URL_ENV).ok_or_else(|| ConfigError::new(format!("hosted-image needs {IMAGE_URL_ENV}")))?;
        Ok(Self { url, key, http: client() })
    }

    pub fn request_body(req: &GenerationRequest<'_>) -> Value {
        let mut body = json!({
            "prompt": req.prompt,
            "width": req.width,
            "height": req.height,
            "seed": req.seed,
            "kind": match req.kind { ElementKind::Background => "background", ElementKind::Foreground => "foreground" },
        });
        if let Some(r) = req.reference {
            body["reference_png"] = Value::String(B64.encode(encode_png(&r.image)));
        }
        body
    }

    pub fn parse_reply(reply: &Value) -> Result<Raster, String> {
        let b64 = reply.get("png").and_then(Value::as_str).ok_or("reply has no `png` field")?;
        let bytes = B64.decode(b64).map_err(|e| e.to_string())?;
        decode_png(&bytes).map_err(|e| e.to_string())
    }
}

impl ImageGeneratorBackend for HostedImageBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::new("hosted-image", Capability::ImageGeneration, false, true)
    }

    fn generate(&mut self, req: &GenerationRequest<'_>) -> Result<Raster, BackendError> {
        let fail = |m: String| BackendError::new("hosted-image", m);
        let resp = self
            .http
            .post(&self.url)
            .bearer_auth(&self.key)
            .json(&Self::request_body(req))
            .send()
            .map_err(|e| fail(e.to_string()))?;
        let status = resp.status();
        let body: Value = resp.json().map_err(|e| fail(e.to_string()))?;
        if !status.is_success() {
            return Err(fail(format!("HTTP {status}: {body}")));
        }
        Self::parse_reply(&body).map_err(fail)
    }

    /// Reference tokens are computed locally; the hosted model receives the
    /// reference image itself.
    fn encode_reference(&mut self, image: &Raster) -> Result<Matrix, BackendError> {
        Ok(HashTokenEncoder.encode_image(image, REFERENCE_TOKEN_DIM))
    }
}
