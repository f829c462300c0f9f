use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{ChatRequest, GatewayError, LlmProvider, ProviderError};

/// A scripted response: fires when the request tag matches (if given) and the
/// user text contains every listed fragment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub tag: Option<String>,
    #[serde(default)]
    pub contains: Vec<String>,
    pub response: String,
}

impl ScriptRule {
    pub fn new(tag: Option<&str>, contains: &[&str], response: &str) -> Self {
        ScriptRule {
            tag: tag.map(str::to_owned),
            contains: contains.iter().map(|s| s.to_string()).collect(),
            response: response.to_owned(),
        }
    }

    fn matches(&self, req: &ChatRequest) -> bool {
        self.tag.as_ref().is_none_or(|t| *t == req.tag)
            && self.contains.iter().all(|c| req.user.contains(c.as_str()))
    }
}

/// Offline provider answering from exact request digests first, then from
/// ordered rules (first match wins).
#[derive(Debug, Default)]
pub struct MockProvider {
    by_digest: HashMap<String, String>,
    rules: Vec<ScriptRule>,
    calls: AtomicUsize,
}

impl MockProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_response(mut self, digest: impl Into<String>, response: impl Into<String>) -> Self {
        self.by_digest.insert(digest.into(), response.into());
        self
    }

    pub fn with_rule(mut self, rule: ScriptRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn with_rules(mut self, rules: impl IntoIterator<Item = ScriptRule>) -> Self {
        self.rules.extend(rules);
        self
    }

    /// Load rules from a JSON Lines file of [`ScriptRule`] records.
    pub fn from_script_file(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::from_script(&text)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_script(text: &str) -> Result<Self, String> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rule: ScriptRule =
                serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
            rules.push(rule);
        }
        Ok(Self::new().with_rules(rules))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmProvider for MockProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(r) = self.by_digest.get(&req.digest()) {
            return Ok(r.clone());
        }
        self.rules
            .iter()
            .find(|rule| rule.matches(req))
            .map(|rule| rule.response.clone())
            .ok_or_else(|| {
                ProviderError::Rejected(format!("no scripted response for {}", req.digest()))
            })
    }
}
