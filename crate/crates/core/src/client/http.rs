//! OpenAI-compatible `/v1/chat/completions` over blocking HTTP.

use std::time::Duration;

use chrono::{TimeZone, Utc};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{Backend, BackendChoice, BackendError, BackendResponse, ChatRequest, EndpointConfig};
use crate::error::Result;
use crate::types::TokenLogprob;

pub struct HttpBackend {
    agent: ureq::Agent,
    api_key: Option<String>,
}

pub(crate) fn endpoint_url(base_url: &str, path: &str) -> String {
    format!("{}/{}", base_url.trim_end_matches('/'), path.trim_start_matches('/'))
}

impl HttpBackend {
    pub fn new(config: &EndpointConfig) -> Result<Self> {
        let api_key = config.api_key()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.request_timeout)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Ok(Self { agent, api_key })
    }

    /// POSTs `body` and returns the response text, classifying failures.
    pub(crate) fn post(&self, url: &str, body: &Value) -> Result<String, BackendError> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let resp = req.send(body.to_string()).map_err(classify_transport)?;
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(classify_transport)?;
        match status {
            200..=299 => Ok(text),
            408 | 429 | 500..=599 => Err(BackendError::Transient(format!("HTTP {status}: {}", snippet(&text)))),
            _ => Err(BackendError::Permanent(format!("HTTP {status}: {}", snippet(&text)))),
        }
    }
}

fn snippet(text: &str) -> &str {
    let end = text.char_indices().nth(300).map(|(i, _)| i).unwrap_or(text.len());
    &text[..end]
}

fn classify_transport(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Io(_)
        | ureq::Error::Timeout(_)
        | ureq::Error::HostNotFound
        | ureq::Error::ConnectionFailed
        | ureq::Error::Protocol(_) => BackendError::Transient(e.to_string()),
        other => BackendError::Permanent(other.to_string()),
    }
}

/// JSON body for one chat-completions call.
pub fn request_body(config: &EndpointConfig, request: &ChatRequest, include_top_k: bool) -> Value {
    let s = &request.sampling;
    let mut body = json!({
        "model": config.model_name,
        "messages": request.messages,
        "temperature": s.temperature,
        "top_p": s.top_p,
        "max_tokens": s.max_tokens,
        "n": s.n,
        "logprobs": request.want_logprobs,
    });
    let obj = body.as_object_mut().unwrap();
    if include_top_k && s.top_k > 0 {
        obj.insert("top_k".into(), json!(s.top_k));
    }
    if let Some(seed) = s.seed {
        obj.insert("seed".into(), json!(seed));
    }
    if request.want_logprobs && request.top_logprobs > 0 {
        obj.insert("top_logprobs".into(), json!(request.top_logprobs));
    }
    body
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    created: Option<i64>,
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    #[serde(default)]
    index: Option<usize>,
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Option<Vec<WireToken>>,
}

#[derive(Deserialize)]
struct WireToken {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<WireAlt>,
}

#[derive(Deserialize)]
struct WireAlt {
    token: String,
    logprob: f64,
}

/// Servers occasionally report tiny positive logprobs from rounding.
fn clamp_lp(lp: f64) -> f64 {
    lp.min(0.0)
}

/// Parses a chat-completions response body.
pub fn parse_response(body: &str) -> Result<(Vec<BackendChoice>, Option<i64>), BackendError> {
    let wire: WireResponse = serde_json::from_str(body)
        .map_err(|e| BackendError::Permanent(format!("malformed completion response: {e}")))?;
    let mut choices: Vec<(usize, BackendChoice)> = wire
        .choices
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let logprobs = c.logprobs.and_then(|l| l.content).map(|toks| {
                toks.into_iter()
                    .map(|t| TokenLogprob {
                        token: t.token,
                        logprob: clamp_lp(t.logprob),
                        top_alternatives: t
                            .top_logprobs
                            .into_iter()
                            .map(|a| (a.token, clamp_lp(a.logprob)))
                            .collect(),
                    })
                    .collect()
            });
            (
                c.index.unwrap_or(i),
                BackendChoice {
                    text: c.message.content.unwrap_or_default(),
                    logprobs,
                },
            )
        })
        .collect();
    choices.sort_by_key(|(i, _)| *i);
    Ok((choices.into_iter().map(|(_, c)| c).collect(), wire.created))
}

impl Backend for HttpBackend {
    fn chat(&self, config: &EndpointConfig, request: &ChatRequest) -> Result<BackendResponse, BackendError> {
        let url = endpoint_url(&config.base_url, "v1/chat/completions");
        let wants_top_k = request.sampling.top_k > 0;
        let mut omitted = Vec::new();
        if wants_top_k && !config.supports_top_k {
            omitted.push("top_k".to_string());
        }
        let include = wants_top_k && config.supports_top_k;
        let text = match self.post(&url, &request_body(config, request, include)) {
            // some servers reject the non-standard field outright; drop it and resend
            Err(BackendError::Permanent(msg)) if include && msg.contains("top_k") => {
                omitted.push("top_k".to_string());
                self.post(&url, &request_body(config, request, false))?
            }
            other => other?,
        };
        let (choices, created) = parse_response(&text)?;
        let created_at = created
            .and_then(|c| Utc.timestamp_opt(c, 0).single())
            .unwrap_or_else(Utc::now);
        Ok(BackendResponse {
            choices,
            omitted_params: omitted,
            created_at,
        })
    }
}
