//! Model providers: a chat-completion endpoint and a fixture-backed stub.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Stage {
    Domains,
    Policies { domain: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct ProviderRequest {
    /// Lets stubs find their canned answer; never sent to a remote model.
    #[serde(skip)]
    pub task_id: Option<String>,
    #[serde(skip)]
    pub task: String,
    pub stage: Stage,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("provider transport: {0}")]
    Transport(String),
    #[error("provider response: {0}")]
    Response(String),
    #[error("no stub answer for task `{task}` at stage {stage}")]
    NoFixture { task: String, stage: String },
    #[error("provider not configured: {0}")]
    NotConfigured(String),
}

pub trait Provider: Send + Sync {
    /// Returns the raw text of the model's reply.
    fn complete(&self, req: &ProviderRequest) -> Result<String, ProviderError>;

    fn label(&self) -> String;
}

/// Chat-completion-style HTTP endpoint.
pub struct RemoteChat {
    pub url: String,
    pub model: String,
    key: String,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for RemoteChat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteChat")
            .field("url", &self.url)
            .field("model", &self.model)
            .finish_non_exhaustive()
    }
}

pub const ENV_URL: &str = "CELLGATE_PROVIDER_URL";
pub const ENV_KEY: &str = "CELLGATE_PROVIDER_KEY";
pub const ENV_MODEL: &str = "CELLGATE_PROVIDER_MODEL";

impl RemoteChat {
    pub fn new(url: &str, model: &str, key: &str) -> Result<RemoteChat, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(RemoteChat {
            url: url.to_owned(),
            model: model.to_owned(),
            key: key.to_owned(),
            client,
        })
    }

    pub fn from_env() -> Result<RemoteChat, ProviderError> {
        let get = |k: &str| std::env::var(k).map_err(|_| ProviderError::NotConfigured(format!("{k} is not set")));
        RemoteChat::new(&get(ENV_URL)?, &get(ENV_MODEL)?, &std::env::var(ENV_KEY).unwrap_or_default())
    }
}

impl Provider for RemoteChat {
    fn complete(&self, req: &ProviderRequest) -> Result<String, ProviderError> {
        let body = json!({
            "model": self.model,
            "messages": req.messages,
            "temperature": 0,
            "response_format": {"type": "json_object"},
        });
        let mut call = self.client.post(&self.url).json(&body);
        if !self.key.is_empty() {
            call = call.bearer_auth(&self.key);
        }
        let resp = call.send().map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status();
        let reply: Json = resp.json().map_err(|e| ProviderError::Response(e.to_string()))?;
        if !status.is_success() {
            return Err(ProviderError::Response(format!("HTTP {status}: {reply}")));
        }
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| ProviderError::Response("reply has no choices[0].message.content".into()))
    }

    fn label(&self) -> String {
        format!("remote:{}", self.model)
    }
}

/// Canned answers keyed by task id (or task text). Each answer gives the
/// domain list and, per domain, the policy selections. A string value is
/// returned verbatim, which lets fixtures simulate malformed output; an
/// object `{"attempts": [...]}` answers successive calls in order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StubAnswer {
    #[serde(default)]
    pub domains: Option<Json>,
    #[serde(default)]
    pub policies: BTreeMap<String, Json>,
}

#[derive(Debug, Default)]
pub struct StubProvider {
    answers: BTreeMap<String, StubAnswer>,
    captured: Mutex<Vec<ProviderRequest>>,
    calls: Mutex<BTreeMap<String, usize>>,
    label: String,
}

impl StubProvider {
    pub fn new(answers: BTreeMap<String, StubAnswer>) -> StubProvider {
        StubProvider {
            answers,
            captured: Mutex::new(Vec::new()),
            calls: Mutex::new(BTreeMap::new()),
            label: "stub".into(),
        }
    }

    pub fn from_file(path: &Path) -> Result<StubProvider, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let answers = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut stub = StubProvider::new(answers);
        stub.label = format!(
            "stub:{}",
            path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
        );
        Ok(stub)
    }

    pub fn with_label(mut self, label: &str) -> StubProvider {
        self.label = label.to_owned();
        self
    }

    /// Every request seen so far, in call order.
    pub fn captured(&self) -> Vec<ProviderRequest> {
        self.captured.lock().clone()
    }

    fn answer_for(&self, req: &ProviderRequest) -> Option<&StubAnswer> {
        req.task_id
            .as_ref()
            .and_then(|id| self.answers.get(id))
            .or_else(|| self.answers.get(&req.task))
    }
}

fn render(value: &Json, wrap: &str, attempt: usize) -> String {
    match value {
        Json::String(raw) => raw.clone(),
        Json::Object(o) if o.contains_key("attempts") => {
            let attempts = o["attempts"].as_array().cloned().unwrap_or_default();
            match attempts.get(attempt).or(attempts.last()) {
                Some(v) => render(v, wrap, 0),
                None => String::new(),
            }
        }
        other => json!({ wrap: other }).to_string(),
    }
}

impl Provider for StubProvider {
    fn complete(&self, req: &ProviderRequest) -> Result<String, ProviderError> {
        self.captured.lock().push(req.clone());
        let (stage, wrap) = match &req.stage {
            Stage::Domains => ("domains".to_owned(), "domains"),
            Stage::Policies { domain } => (format!("policies:{domain}"), "policies"),
        };
        let key = format!("{}|{}|{stage}", req.task_id.as_deref().unwrap_or(""), req.task);
        let attempt = {
            let mut calls = self.calls.lock();
            let n = calls.entry(key).or_insert(0);
            *n += 1;
            *n - 1
        };
        let missing = || ProviderError::NoFixture {
            task: req.task_id.clone().unwrap_or_else(|| req.task.clone()),
            stage: stage.clone(),
        };
        let answer = self.answer_for(req).ok_or_else(missing)?;
        let value = match &req.stage {
            Stage::Domains => answer.domains.as_ref(),
            Stage::Policies { domain } => answer.policies.get(domain),
        }
        .ok_or_else(missing)?;
        Ok(render(value, wrap, attempt))
    }

    fn label(&self) -> String {
        self.label.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(stage: Stage) -> ProviderRequest {
        ProviderRequest {
            task_id: Some("t1".into()),
            task: "buy".into(),
            stage,
            messages: vec![ChatMessage::user("buy")],
        }
    }

    #[test]
    fn stub_wraps_structured_answers_and_replays_attempts() {
        let answers: BTreeMap<String, StubAnswer> = serde_json::from_value(json!({
            "t1": {"domains": ["amazon.com"],
                   "policies": {"amazon.com": {"attempts": ["not json", [{"name": "view_shopping_cart"}]]}}}
        }))
        .unwrap();
        let stub = StubProvider::new(answers);
        assert_eq!(stub.complete(&req(Stage::Domains)).unwrap(), r#"{"domains":["amazon.com"]}"#);
        let p = Stage::Policies {
            domain: "amazon.com".into(),
        };
        assert_eq!(stub.complete(&req(p.clone())).unwrap(), "not json");
        assert_eq!(
            stub.complete(&req(p.clone())).unwrap(),
            r#"{"policies":[{"name":"view_shopping_cart"}]}"#
        );
        let other = Stage::Policies {
            domain: "gitlab.com".into(),
        };
        assert!(matches!(stub.complete(&req(other)), Err(ProviderError::NoFixture { .. })));
        assert_eq!(stub.captured().len(), 4);
    }
}
