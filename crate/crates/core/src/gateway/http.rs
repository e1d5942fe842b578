//! HTTP backend speaking the common hosted-model wire formats:
//! `POST {url}/chat/completions`, `POST {url}/embeddings` and
//! `POST {url}/rerank` (`{query, documents}` → `{results: [{index, relevance_score}]}`).

use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, Completion, ModelBackend, Prompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub llm_url: String,
    pub vlm_url: Option<String>,
    pub embed_url: Option<String>,
    pub rerank_url: Option<String>,
    pub api_key: Option<String>,
    pub llm_model: String,
    pub vlm_model: String,
    pub embed_model: String,
    pub rerank_model: String,
    pub dimension: usize,
    pub timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            llm_url: "http://127.0.0.1:8000/v1".into(),
            vlm_url: None,
            embed_url: None,
            rerank_url: None,
            api_key: None,
            llm_model: "Qwen3-8B".into(),
            vlm_model: "Qwen2.5-VL-30B".into(),
            embed_model: "Qwen3-Embedding-0.6B".into(),
            rerank_model: "Qwen3-Reranker-4B".into(),
            dimension: 1024,
            timeout_secs: 120,
        }
    }
}

pub struct HttpBackend {
    cfg: HttpConfig,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("llm_url", &self.cfg.llm_url)
            .finish()
    }
}

fn endpoint(base: &str, path: &str) -> String {
    format!("{}/{path}", base.trim_end_matches('/'))
}

fn classify(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::Timeout(t) => BackendError {
            message: format!("timed out ({t:?})"),
            retryable: true,
            timeout: true,
        },
        ureq::Error::StatusCode(code) => BackendError {
            message: format!("HTTP {code}"),
            retryable: code == 429 || code >= 500,
            timeout: false,
        },
        other => BackendError::transient(other.to_string()),
    }
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .build()
            .into();
        HttpBackend { cfg, agent }
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value, BackendError> {
        let mut req = self.agent.post(url);
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(classify)?;
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| BackendError::fatal(format!("bad response body: {e}")))
    }

    fn chat(&self, url: &str, model: &str, content: Value) -> Result<Completion, BackendError> {
        let body = json!({
            "model": model,
            "messages": [{"role": "user", "content": content}],
            "temperature": 0,
        });
        let v = self.post(&endpoint(url, "chat/completions"), &body)?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| BackendError::fatal("response has no choices[0].message.content"))?
            .to_string();
        Ok(Completion {
            prompt_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
            text,
        })
    }
}

impl ModelBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn dimension(&self) -> usize {
        self.cfg.dimension
    }

    fn complete(&self, prompt: &Prompt) -> Result<Completion, BackendError> {
        self.chat(
            &self.cfg.llm_url,
            &self.cfg.llm_model,
            Value::String(prompt.text.clone()),
        )
    }

    fn complete_vision(&self, prompt: &Prompt, image: &[u8]) -> Result<Completion, BackendError> {
        let url = self.cfg.vlm_url.as_deref().unwrap_or(&self.cfg.llm_url);
        let data = base64::engine::general_purpose::STANDARD.encode(image);
        let content = json!([
            {"type": "text", "text": prompt.text},
            {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{data}")}},
        ]);
        self.chat(url, &self.cfg.vlm_model, content)
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        let url = self.cfg.embed_url.as_deref().unwrap_or(&self.cfg.llm_url);
        let v = self.post(
            &endpoint(url, "embeddings"),
            &json!({"model": self.cfg.embed_model, "input": text}),
        )?;
        let arr = v["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| BackendError::fatal("response has no data[0].embedding"))?;
        arr.iter()
            .map(|x| {
                x.as_f64()
                    .map(|f| f as f32)
                    .ok_or_else(|| BackendError::fatal("non-numeric embedding component"))
            })
            .collect()
    }

    fn rerank(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>, BackendError> {
        let url = self.cfg.rerank_url.as_deref().unwrap_or(&self.cfg.llm_url);
        let v = self.post(
            &endpoint(url, "rerank"),
            &json!({"model": self.cfg.rerank_model, "query": query, "documents": candidates}),
        )?;
        let results = v["results"]
            .as_array()
            .ok_or_else(|| BackendError::fatal("response has no results"))?;
        let mut scores = vec![None; candidates.len()];
        for r in results {
            let idx = r["index"].as_u64().map(|i| i as usize);
            let score = r["relevance_score"].as_f64().or_else(|| r["score"].as_f64());
            match (idx, score) {
                (Some(i), Some(s)) if i < scores.len() => scores[i] = Some(s),
                _ => return Err(BackendError::fatal("malformed rerank result")),
            }
        }
        scores
            .into_iter()
            .map(|s| s.ok_or_else(|| BackendError::fatal("rerank result missing a candidate")))
            .collect()
    }
}
