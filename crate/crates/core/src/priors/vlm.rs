//! Chat-completions client that reads answer-token probabilities.
//!
//! Request (`prompt_version` gpp-prompt-1):
//!
//! ```json
//! {"model": "...", "max_tokens": 1, "temperature": 0, "logprobs": true, "top_logprobs": 20,
//!  "messages": [{"role": "user", "content": [
//!     {"type": "text", "text": "<prompt>"},
//!     {"type": "image_url", "image_url": {"url": "data:image/png;base64,<png>"}}]}]}
//! ```
//!
//! Response: `choices[0].logprobs.content[0].top_logprobs` as a list of
//! `{"token", "logprob"}` objects. A `{token: logprob}` map in the same place is
//! accepted too.

use std::io::Cursor;
use std::time::Duration;

use base64::Engine;
use image::{ImageFormat, RgbImage};
use serde_json::{json, Value};

use super::{build_prompt, AssessmentLogits, AttributeSpec, PriorProvider, Scope};
use crate::error::{CoreError, Result};
use crate::imaging::Image;

pub const TOP_LOGPROBS: usize = 20;
/// Missing answer tokens get the smallest returned logprob minus this.
pub const FLOOR_OFFSET: f64 = 2.3;

#[derive(Clone, Debug)]
pub struct VlmClientConfig {
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub retries: u32,
    pub backoff: Duration,
}

impl VlmClientConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            api_key: None,
            model: "gpp-assessor".into(),
            timeout: Duration::from_secs(60),
            retries: 3,
            backoff: Duration::from_millis(500),
        }
    }

    /// Reads `GPP_VLM_URL`, `GPP_VLM_KEY` and optionally `GPP_VLM_MODEL`.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var("GPP_VLM_URL").ok().filter(|s| !s.is_empty())?;
        let mut cfg = Self::new(url);
        cfg.api_key = std::env::var("GPP_VLM_KEY").ok().filter(|s| !s.is_empty());
        if let Ok(m) = std::env::var("GPP_VLM_MODEL") {
            if !m.is_empty() {
                cfg.model = m;
            }
        }
        Some(cfg)
    }
}

fn png_base64(image: &Image) -> String {
    let buf = RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
        .expect("buffer length matches dimensions");
    let mut bytes = Cursor::new(Vec::new());
    buf.write_to(&mut bytes, ImageFormat::Png).expect("in-memory png encoding");
    base64::engine::general_purpose::STANDARD.encode(bytes.into_inner())
}

pub fn request_body(model: &str, prompt: &str, image: &Image) -> Value {
    json!({
        "model": model,
        "max_tokens": 1,
        "temperature": 0,
        "logprobs": true,
        "top_logprobs": TOP_LOGPROBS,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": prompt},
                {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{}", png_base64(image))}}
            ]
        }]
    })
}

fn candidates(response: &Value) -> std::result::Result<Vec<(String, f64)>, String> {
    let top = response
        .pointer("/choices/0/logprobs/content/0/top_logprobs")
        .ok_or("response lacks choices[0].logprobs.content[0].top_logprobs")?;
    let pairs: Vec<(String, f64)> = match top {
        Value::Array(items) => items
            .iter()
            .map(|it| {
                let token = it.get("token").and_then(Value::as_str);
                let lp = it.get("logprob").and_then(Value::as_f64);
                token.zip(lp).map(|(t, l)| (t.to_string(), l)).ok_or("malformed top_logprobs entry")
            })
            .collect::<std::result::Result<_, _>>()?,
        Value::Object(map) => map
            .iter()
            .map(|(t, l)| l.as_f64().map(|l| (t.clone(), l)).ok_or("non-numeric logprob"))
            .collect::<std::result::Result<_, _>>()?,
        _ => return Err("top_logprobs is neither a list nor a map".into()),
    };
    if pairs.is_empty() {
        return Err("empty top_logprobs".into());
    }
    Ok(pairs)
}

fn normalise(token: &str) -> String {
    token.strip_prefix(' ').unwrap_or(token).to_lowercase()
}

/// Answer-token probabilities from candidate `(token, logprob)` pairs.
///
/// Returns `(p_pos, p_neg, degraded)`; `degraded` is set when neither answer
/// appears, in which case both get the floor and the gap is zero.
pub fn parse_logprobs(pairs: &[(String, f64)]) -> (f64, f64, bool) {
    let best = |word: &str| {
        pairs
            .iter()
            .filter(|(t, _)| normalise(t) == word)
            .map(|(_, l)| *l)
            .fold(None, |acc: Option<f64>, l| Some(acc.map_or(l, |a| a.max(l))))
    };
    let floor = pairs.iter().map(|(_, l)| *l).fold(f64::INFINITY, f64::min) - FLOOR_OFFSET;
    let (good, poor) = (best("good"), best("poor"));
    let degraded = good.is_none() && poor.is_none();
    (good.unwrap_or(floor).exp(), poor.unwrap_or(floor).exp(), degraded)
}

pub struct VlmProvider {
    config: VlmClientConfig,
    agent: ureq::Agent,
    id: String,
}

impl VlmProvider {
    pub fn new(config: VlmClientConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .new_agent();
        let id = format!("vlm:{}", config.model);
        Self { config, agent, id }
    }

    fn attempt(&self, body: &Value) -> std::result::Result<Value, String> {
        let mut req = self.agent.post(&self.config.url).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        resp.body_mut().read_json::<Value>().map_err(|e| format!("malformed response: {e}"))
    }
}

impl PriorProvider for VlmProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn assess(&self, image: &Image, spec: &AttributeSpec, scope: Scope) -> Result<AssessmentLogits> {
        let prompt = build_prompt(spec, scope)?;
        let body = request_body(&self.config.model, &prompt, image);
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff * 2u32.pow(attempt - 1));
            }
            match self.attempt(&body).and_then(|v| candidates(&v).map(|c| (v, c))) {
                Ok((raw, pairs)) => {
                    let (p_pos, p_neg, degraded) = parse_logprobs(&pairs);
                    if degraded {
                        log::warn!("{}: neither answer token among the candidates", self.id);
                    }
                    return Ok(AssessmentLogits { p_pos, p_neg, provider_id: self.id.clone(), raw: Some(raw), degraded });
                }
                Err(e) => {
                    log::debug!("{} attempt {} failed: {e}", self.id, attempt + 1);
                    last = e;
                }
            }
        }
        Err(CoreError::Provider { provider: self.id.clone(), retries: self.config.retries, detail: last })
    }
}
