//! Remote LMM judge speaking the OpenAI-style chat completions protocol.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ImageSlot, Judge, JudgeQuery, JudgeVerdict, PromptPart};
use crate::error::{Error, Result};
use crate::model::{FailureKind, ImageRecord, Response};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageEncoding {
    /// `data:` URL with the file bytes in base64.
    #[default]
    Base64,
}

fn default_concurrency() -> usize {
    4
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_max_tokens() -> u32 {
    64
}

/// Endpoint config file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpJudgeConfig {
    pub url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub image_encoding: ImageEncoding,
    /// First retry delay; doubles on each further attempt.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

impl HttpJudgeConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Case-insensitive keyword rule: exactly one of "first"/"second" must occur.
pub fn parse_reply(reply: &str) -> Response {
    let lower = reply.to_lowercase();
    match (lower.contains("first"), lower.contains("second")) {
        (true, false) => Response::First,
        (false, true) => Response::Second,
        _ => Response::Abstain,
    }
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("bmp") => "image/bmp",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("tif" | "tiff") => "image/tiff",
        Some("ppm" | "pgm" | "pnm") => "image/x-portable-anymap",
        _ => "image/png",
    }
}

pub struct HttpJudge {
    config: HttpJudgeConfig,
    image_root: PathBuf,
    token: Option<String>,
    client: reqwest::blocking::Client,
    id: String,
}

impl HttpJudge {
    /// Image `path` fields are resolved against `image_root`. The token is
    /// read from the configured environment variable once, here.
    pub fn new(config: HttpJudgeConfig, image_root: impl Into<PathBuf>) -> Result<Self> {
        let token = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| Error::invalid(format!("environment variable `{var}` is not set")))?),
            None => None,
        };
        if config.max_concurrency == 0 {
            return Err(Error::invalid("max_concurrency must be >= 1"));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| Error::invalid(format!("http client: {e}")))?;
        let id = format!("http:{}", config.model);
        Ok(Self {
            config,
            image_root: image_root.into(),
            token,
            client,
            id,
        })
    }

    fn image_url(&self, img: &ImageRecord) -> Result<String> {
        let path = self.image_root.join(&img.file_ref);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        match self.config.image_encoding {
            ImageEncoding::Base64 => Ok(format!("data:{};base64,{}", mime_for(&path), STANDARD.encode(bytes))),
        }
    }

    /// The request body for one presentation.
    pub fn request_body(&self, q: &JudgeQuery<'_>) -> Result<Value> {
        let mut content = Vec::with_capacity(q.prompt_parts.len());
        for part in q.prompt_parts {
            content.push(match part {
                PromptPart::Text(text) => json!({"type": "text", "text": text}),
                PromptPart::Image(slot) => {
                    let img = match slot {
                        ImageSlot::First => q.first,
                        ImageSlot::Second => q.second,
                    };
                    json!({"type": "image_url", "image_url": {"url": self.image_url(img)?}})
                }
            });
        }
        Ok(json!({
            "model": self.config.model,
            "max_tokens": self.config.max_tokens,
            "temperature": 0,
            "messages": [{"role": "user", "content": content}],
        }))
    }

    fn send_once(&self, body: &Value) -> std::result::Result<String, String> {
        let mut req = self.client.post(&self.config.url).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("http status {status}"));
        }
        let value: Value = resp.json().map_err(|e| e.to_string())?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| format!("reply without choices[0].message.content: {value}"))
    }
}

impl Judge for HttpJudge {
    fn id(&self) -> &str {
        &self.id
    }

    fn judge(&self, q: &JudgeQuery<'_>) -> Result<JudgeVerdict> {
        let body = self.request_body(q)?;
        let started = Instant::now();
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.send_once(&body) {
                Ok(reply) => {
                    let choice = parse_reply(&reply);
                    return Ok(JudgeVerdict {
                        choice,
                        failure: (choice == Response::Abstain).then_some(FailureKind::Parse),
                        raw_reply: Some(reply),
                        latency: Some(started.elapsed()),
                    });
                }
                Err(e) => {
                    log::warn!("{} attempt {} for {}: {e}", self.id, attempt + 1, q.trial_id);
                    last_error = e;
                }
            }
        }
        let mut verdict = JudgeVerdict::abstain(FailureKind::Transport, Some(last_error));
        verdict.latency = Some(started.elapsed());
        Ok(verdict)
    }

    fn max_concurrency(&self) -> usize {
        self.config.max_concurrency
    }
}
